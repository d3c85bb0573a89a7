"""Channel transformations applied to teacher features.

A transformation maps teacher channels onto student channel slots.  For the
index-based kinds, ``map[j]`` is the teacher channel that feeds student
channel ``j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib import format as npformat

from .activations import ActivationTensor, PooledActivations
from .errors import ConfigError, FormatError, InvalidValue, IoError, ShapeMismatch

KINDS = ("identity", "permutation", "index_map", "linear", "residual")
_WEIGHT_NAMES = {"linear": ("w",), "residual": ("w1", "b1", "w2", "b2")}


@dataclass
class Transformation:
    kind: str
    channels: int
    map: np.ndarray | None = None
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transformation kind {self.kind!r}")
        c = self.channels = int(self.channels)
        if c < 1:
            raise ConfigError("transformation needs at least one channel")
        if self.kind in ("permutation", "index_map"):
            m = np.asarray(self.map, dtype=np.int64)
            if m.shape != (c,):
                raise ShapeMismatch(f"map must have length {c}, got shape {m.shape}")
            if np.any(m < 0) or np.any(m >= c):
                raise InvalidValue("map entries must lie in [0, channels)")
            if self.kind == "permutation" and len(np.unique(m)) != c:
                raise InvalidValue("permutation map is not a bijection")
            self.map = m
        elif self.kind == "identity":
            self.map = None
        else:
            self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in self.weights.items()}
            missing = set(_WEIGHT_NAMES[self.kind]) - set(self.weights)
            if missing:
                raise ConfigError(f"{self.kind} transformation lacks weights {sorted(missing)}")
            for name, arr in self.weights.items():
                if not np.all(np.isfinite(arr)):
                    raise InvalidValue(f"weight {name} is not finite")
            self._check_weight_shapes()

    def _check_weight_shapes(self):
        c = self.channels
        if self.kind == "linear":
            if self.weights["w"].shape != (c, c):
                raise ShapeMismatch(f"linear weight must be {c}x{c}")
        else:
            w1, b1, w2, b2 = (self.weights[k] for k in ("w1", "b1", "w2", "b2"))
            hidden = w1.shape[1] if w1.ndim == 2 else -1
            if w1.shape != (c, hidden) or b1.shape != (hidden,) or w2.shape != (hidden, c) or b2.shape != (c,):
                raise ShapeMismatch("residual weights have inconsistent shapes")

    @property
    def is_index_based(self) -> bool:
        return self.kind in ("identity", "permutation", "index_map")

    def index_map(self) -> np.ndarray:
        if self.kind == "identity":
            return np.arange(self.channels)
        if self.map is None:
            raise ConfigError(f"{self.kind} transformation has no index map")
        return self.map

    def inverse(self) -> "Transformation":
        if self.kind == "identity":
            return self
        if self.kind != "permutation":
            raise ConfigError(f"{self.kind} transformation is not invertible by reindexing")
        inv = np.empty_like(self.map)
        inv[self.map] = np.arange(self.channels)
        return Transformation("permutation", self.channels, inv, provenance={"inverse_of": self.provenance})

    def apply_matrix(self, x: np.ndarray) -> np.ndarray:
        """Apply to a (b, c) or (b, c, h, w) array."""
        x = np.asarray(x)
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"expected {self.channels} channels, got shape {x.shape}")
        if self.kind == "identity":
            return x
        if self.is_index_based:
            return x[:, self.map]
        # channel-last view so 1x1 mixing is a plain matmul per position
        moved = np.moveaxis(x, 1, -1)
        if self.kind == "linear":
            out = moved @ self.weights["w"]
        else:
            w = self.weights
            hidden = np.maximum(moved @ w["w1"] + w["b1"], 0.0)
            out = moved + hidden @ w["w2"] + w["b2"]
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def save(self, path) -> None:
        """Write a JSON record; matrix payloads go to sibling NPY files."""
        path = Path(path)
        record = {"kind": self.kind, "channels": self.channels, "provenance": self.provenance}
        if self.map is not None:
            record["map"] = [int(v) for v in self.map]
        if self.weights:
            refs = {}
            for name, arr in sorted(self.weights.items()):
                wpath = path.with_name(f"{path.name}.{name}.npy")
                try:
                    with open(wpath, "wb") as fh:
                        npformat.write_array(fh, np.ascontiguousarray(arr, dtype="<f8"), version=(1, 0))
                except OSError as exc:
                    raise IoError(f"cannot write {wpath}: {exc}") from exc
                refs[name] = wpath.name
            record["weights"] = refs
        try:
            path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Transformation":
        path = Path(path)
        try:
            record = json.loads(path.read_text())
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        except ValueError as exc:
            raise FormatError(f"{path}: not a transformation record") from exc
        weights = {}
        for name, ref in record.get("weights", {}).items():
            try:
                weights[name] = np.load(path.parent / ref, allow_pickle=False)
            except OSError as exc:
                raise IoError(f"cannot read weight file {ref}: {exc}") from exc
        try:
            return cls(
                record["kind"],
                record["channels"],
                record.get("map"),
                weights,
                record.get("provenance", {}),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: record lacks {exc}") from exc


def apply_transform(t: Transformation, x):
    """Apply ``t`` to an ActivationTensor, PooledActivations or raw array; same type out."""
    if isinstance(x, ActivationTensor):
        out = t.apply_matrix(x.data)
        if t.kind in ("linear", "residual"):
            out = out.astype(x.dtype)
        return ActivationTensor(out)
    if isinstance(x, PooledActivations):
        return PooledActivations(t.apply_matrix(x.data), x.source_shape)
    return t.apply_matrix(x)


def identity_transform(c: int) -> Transformation:
    return Transformation("identity", c, provenance={"strategy": "identity"})
