"""Derive channel transformations from a consistency matrix.

Conventions: rows of ``M`` are teacher channels, columns student channels.
Every matcher returns ``map`` with ``map[j]`` = teacher channel assigned to
student channel ``j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import PooledActivations
from .consistency import ConsistencyMatrix, ConsistencyMetric, consistency_matrix
from .errors import ConfigError, FormatError, InvalidValue, IoError, PartitionError, ShapeMismatch
from .transforms import Transformation, identity_transform

__all__ = [
    "hungarian",
    "match_greedy",
    "match_bipartite",
    "match_random",
    "identity_transform",
    "derive_transform",
    "PerClassTransformSet",
    "per_class_transforms",
    "load_any_transform",
]

STRATEGIES = ("identity", "greedy", "bipartite", "random")


def _square(m) -> np.ndarray:
    mat = m.m if isinstance(m, ConsistencyMatrix) else np.asarray(m, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeMismatch(f"consistency matrix must be square, got shape {mat.shape}")
    if np.isnan(mat).any():
        raise InvalidValue("consistency matrix contains NaN")
    if not np.all(np.isfinite(mat)):
        raise InvalidValue("consistency matrix contains Inf")
    return mat


def _provenance(m, strategy: str, **extra) -> dict:
    prov = {"strategy": strategy}
    if isinstance(m, ConsistencyMatrix):
        prov["metric"] = m.metric.kind
        prov["sample_count"] = m.sample_count
    prov.update(extra)
    return prov


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimum-cost assignment on a square cost matrix (shortest augmenting paths, O(n^3)).

    Returns ``(assign, u, v)`` where row ``r`` is matched to column
    ``assign[r]`` and the duals satisfy ``cost[r, c] - u[r] - v[c] >= 0``,
    with equality on matched pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[col] = row (1-based), 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for row in range(1, n + 1):
        owner[0] = row
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[owner[1:] - 1] = np.arange(n)
    return assign, u[1:], v[1:]


def _lexicographic_min_matching(tight: np.ndarray, assign: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the ``tight`` edge set.

    ``assign`` must already be a perfect matching using tight edges.  Rows are
    fixed in order; for each row the smallest column is taken for which the
    rest of the matching can be repaired along an alternating path.
    """
    n = tight.shape[0]
    assign = assign.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[assign] = np.arange(n)
    for j in range(n):
        cur = assign[j]
        open_rows = np.arange(j + 1, n)
        # reverse search from the column ``j`` would vacate: next_col[r] is the
        # column row r moves to when displaced, on a path that ends at ``cur``
        next_col = {}
        frontier = [cur]
        while frontier and len(next_col) < len(open_rows):
            new = []
            for col in frontier:
                for r in open_rows[tight[open_rows, col]]:
                    r = int(r)
                    if r not in next_col:
                        next_col[r] = col
                        new.append(int(assign[r]))
            frontier = new
        best = cur
        for col in np.flatnonzero(tight[j]):
            if col >= best:
                break
            r = int(owner[col])
            if r > j and r in next_col:
                best = int(col)
                break
        if best == cur:
            continue
        r = int(owner[best])
        assign[j] = best
        owner[best] = j
        while True:
            col = next_col[r]
            displaced = int(owner[col])
            assign[r] = col
            owner[col] = r
            if col == cur:
                break
            r = displaced
    return assign


def _tight_edges(cost, u, v) -> np.ndarray:
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-10 * max(1.0, float(np.abs(cost).max()))
    return reduced <= tol


def match_greedy(m) -> Transformation:
    """Each student channel takes its most consistent teacher channel (repeats allowed)."""
    mat = _square(m)
    mapping = np.argmax(mat, axis=0)
    return Transformation("index_map", mat.shape[0], mapping, provenance=_provenance(m, "greedy"))


def match_bipartite(m) -> Transformation:
    """One-to-one teacher/student assignment maximizing the consistency score.

    Among several optimal permutations the lexicographically smallest map is
    returned.
    """
    mat = _square(m)
    # rows = student channels, columns = teacher channels, shifted to nonnegative cost
    cost = mat.max() - mat.T
    assign, u, v = hungarian(cost)
    assign = _lexicographic_min_matching(_tight_edges(cost, u, v), assign)
    return Transformation("permutation", mat.shape[0], assign, provenance=_provenance(m, "bipartite"))


def match_random(c: int, seed: int) -> Transformation:
    if c < 1:
        raise ConfigError("channel count must be >= 1")
    perm = np.random.default_rng(seed).permutation(c)
    return Transformation("permutation", c, perm, provenance={"strategy": "random", "seed": int(seed)})


def derive_transform(m, strategy: str, seed: int = 0) -> Transformation:
    c = _square(m).shape[0]
    if strategy == "identity":
        return identity_transform(c)
    if strategy == "greedy":
        return match_greedy(m)
    if strategy == "bipartite":
        return match_bipartite(m)
    if strategy == "random":
        return match_random(c, seed)
    raise ConfigError(f"unknown matching strategy {strategy!r}; choose from {STRATEGIES}")


@dataclass
class PerClassTransformSet:
    k_partitions: int
    class_to_partition: dict[int, int]
    transforms: list[Transformation] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.transforms[0].channels

    def lookup(self, label: int) -> Transformation:
        try:
            return self.transforms[self.class_to_partition[int(label)]]
        except KeyError:
            raise ConfigError(f"label {label} is not covered by any partition") from None

    def apply_matrix(self, x: np.ndarray, labels) -> np.ndarray:
        """Route every sample through the transform of its label's partition."""
        labels = np.asarray(labels)
        out = np.empty_like(np.asarray(x, dtype=np.float64))
        parts = np.array([self.class_to_partition[int(l)] for l in labels])
        for k, t in enumerate(self.transforms):
            rows = parts == k
            if rows.any():
                out[rows] = t.apply_matrix(x[rows])
        return out

    def save(self, path) -> None:
        path = Path(path)
        parts = []
        for k, t in enumerate(self.transforms):
            part = path.with_name(f"{path.name}.part{k}")
            t.save(part)
            parts.append(part.name)
        record = {
            "kind": "per_class",
            "k_partitions": self.k_partitions,
            "class_to_partition": {str(c): p for c, p in sorted(self.class_to_partition.items())},
            "parts": parts,
        }
        path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PerClassTransformSet":
        path = Path(path)
        record = json.loads(path.read_text())
        if record.get("kind") != "per_class":
            raise FormatError(f"{path}: not a per-class transform record")
        mapping = {int(c): int(p) for c, p in record["class_to_partition"].items()}
        transforms = [Transformation.load(path.parent / name) for name in record["parts"]]
        return cls(int(record["k_partitions"]), mapping, transforms)


def load_any_transform(path):
    """Load either a single transformation or a per-class set."""
    try:
        kind = json.loads(Path(path).read_text()).get("kind")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: not a transformation record") from exc
    if kind == "per_class":
        return PerClassTransformSet.load(path)
    return Transformation.load(path)


def partition_classes(labels, k: int) -> dict[int, int]:
    classes = np.unique(np.asarray(labels))
    if k < 1 or len(classes) % k:
        raise PartitionError(f"{len(classes)} classes cannot be split into {k} equal partitions")
    size = len(classes) // k
    return {int(cls): i // size for i, cls in enumerate(classes)}


def per_class_transforms(
    pooled_t, pooled_s, labels, k: int, metric="correlation", strategy: str = "bipartite"
) -> PerClassTransformSet:
    if strategy not in ("greedy", "bipartite"):
        raise ConfigError("per-class transforms support the greedy and bipartite strategies")
    metric = ConsistencyMetric.coerce(metric)
    labels = np.asarray(labels)
    mapping = partition_classes(labels, k)
    parts = np.array([mapping[int(l)] for l in labels])
    t = pooled_t.data if isinstance(pooled_t, PooledActivations) else np.asarray(pooled_t, dtype=np.float64)
    s = pooled_s.data if isinstance(pooled_s, PooledActivations) else np.asarray(pooled_s, dtype=np.float64)
    transforms = []
    for part in range(k):
        rows = parts == part
        m = consistency_matrix(t[rows], s[rows], metric)
        tr = derive_transform(m, strategy)
        tr.provenance["partition"] = part
        transforms.append(tr)
    return PerClassTransformSet(k, mapping, transforms)
