"""Teacher/student channel consistency matrices and the consistency score."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib import format as npformat
from scipy.special import log_softmax, softmax

from .activations import PooledActivations
from .errors import ConfigError, FormatError, InsufficientSamples, InvalidValue, IoError, ShapeMismatch
from .transforms import Transformation

METRICS = ("l1", "l2", "correlation", "cosine", "kl")
_ALIASES = {"corr": "correlation", "pearson": "correlation", "kl_divergence": "kl", "kldivergence": "kl"}


@dataclass(frozen=True)
class ConsistencyMetric:
    kind: str = "correlation"
    epsilon: float = 1e-8

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in METRICS:
            raise ConfigError(f"unknown consistency metric {self.kind!r}; choose from {METRICS}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        object.__setattr__(self, "kind", kind)

    @classmethod
    def coerce(cls, metric) -> "ConsistencyMetric":
        if isinstance(metric, cls):
            return metric
        return cls(str(metric))


@dataclass
class ConsistencyMatrix:
    """``m[i, j]`` scores teacher channel i against student channel j; larger is more consistent."""

    m: np.ndarray
    metric: ConsistencyMetric
    sample_count: int

    @property
    def channels(self) -> int:
        return self.m.shape[0]

    def save(self, path) -> None:
        path = Path(path)
        meta = {
            "metric": self.metric.kind,
            "epsilon": self.metric.epsilon,
            "sample_count": self.sample_count,
            "shape": list(self.m.shape),
        }
        try:
            with open(path, "wb") as fh:
                npformat.write_array(fh, np.ascontiguousarray(self.m, dtype="<f8"), version=(1, 0))
            _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ConsistencyMatrix":
        path = Path(path)
        try:
            m = np.load(path, allow_pickle=False)
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        meta = {}
        if _sidecar(path).exists():
            meta = json.loads(_sidecar(path).read_text())
        metric = ConsistencyMetric(meta.get("metric", "correlation"), meta.get("epsilon", 1e-8))
        if m.ndim != 2:
            raise ShapeMismatch(f"{path}: consistency matrix must be 2-D")
        return cls(m.astype(np.float64), metric, int(meta.get("sample_count", 0)))


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, PooledActivations):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _lp_rows(t: np.ndarray, s: np.ndarray, rows: range, p: int, eps: float) -> np.ndarray:
    out = np.empty((len(rows), s.shape[1]))
    for k, i in enumerate(rows):
        diff = s - t[:, i : i + 1]
        if p == 1:
            dist = np.abs(diff).sum(axis=0)
        else:
            dist = np.sqrt(np.einsum("bj,bj->j", diff, diff))
        out[k] = 1.0 / (dist + eps)
    return out


def _lp_matrix(t, s, p, eps, threads):
    c = t.shape[1]
    if threads <= 1 or c < 2:
        return _lp_rows(t, s, range(c), p, eps)
    bounds = np.linspace(0, c, min(threads, c) + 1).astype(int)
    chunks = [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda r: _lp_rows(t, s, r, p, eps), chunks))
    return np.vstack(parts)


def _correlation(t: np.ndarray, s: np.ndarray) -> np.ndarray:
    # shifted-data sums: r = (b*Sxy - Sx*Sy) / sqrt((b*Sxx - Sx^2)(b*Syy - Sy^2)),
    # shifting each channel by its first sample keeps the sums small and
    # makes integer-valued inputs exact.
    b = t.shape[0]
    tk = t - t[0]
    sk = s - s[0]
    sum_t, sum_s = tk.sum(axis=0), sk.sum(axis=0)
    cov = b * (tk.T @ sk) - np.outer(sum_t, sum_s)
    var_t = np.maximum(b * np.einsum("bi,bi->i", tk, tk) - sum_t**2, 0.0)
    var_s = np.maximum(b * np.einsum("bj,bj->j", sk, sk) - sum_s**2, 0.0)
    denom = np.sqrt(np.outer(var_t, var_s))
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.where(denom > 0, cov / denom, 0.0)
    return np.clip(m, -1.0, 1.0)


def _cosine(t, s, eps):
    norms = np.outer(np.linalg.norm(t, axis=0), np.linalg.norm(s, axis=0))
    return (t.T @ s) / (norms + eps)


def _neg_kl(t, s):
    # distributions over the batch axis, one per channel
    p = softmax(t, axis=0)
    log_p = log_softmax(t, axis=0)
    log_q = log_softmax(s, axis=0)
    neg_entropy = np.einsum("bi,bi->i", p, log_p)
    kl = neg_entropy[:, None] - p.T @ log_q
    return -np.maximum(kl, 0.0)


def consistency_matrix(teacher, student, metric="correlation", threads: int = 1) -> ConsistencyMatrix:
    metric = ConsistencyMetric.coerce(metric)
    t, s = _as_matrix(teacher), _as_matrix(student)
    if t.ndim != 2 or s.ndim != 2:
        raise ShapeMismatch("pooled features must be b x c matrices")
    if t.shape[0] != s.shape[0]:
        raise ShapeMismatch(f"batch mismatch: teacher {t.shape[0]} vs student {s.shape[0]}")
    if t.shape[1] != s.shape[1]:
        raise ShapeMismatch(f"channel mismatch: teacher {t.shape[1]} vs student {s.shape[1]}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
        raise InvalidValue("pooled features contain NaN or Inf")
    b = t.shape[0]

    if metric.kind == "correlation":
        if b < 2:
            raise InsufficientSamples("correlation needs at least 2 samples")
        m = _correlation(t, s)
    elif metric.kind in ("l1", "l2"):
        m = _lp_matrix(t, s, 1 if metric.kind == "l1" else 2, metric.epsilon, threads)
    elif metric.kind == "cosine":
        m = _cosine(t, s, metric.epsilon)
    else:
        m = _neg_kl(t, s)
    return ConsistencyMatrix(m, metric, b)


def consistency_score(
    m: ConsistencyMatrix | np.ndarray,
    transform: Transformation | None = None,
    *,
    teacher=None,
    student=None,
) -> float:
    """Trace of the consistency matrix under ``transform``.

    Index-based transforms are scored by lookup, ``sum_j m[map[j], j]``.
    Linear and residual transforms need the pooled ``teacher`` and ``student``
    features, because the matrix has to be recomputed on transformed inputs.
    """
    mat = m.m if isinstance(m, ConsistencyMatrix) else np.asarray(m, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeMismatch(f"consistency matrix must be square, got {mat.shape}")
    c = mat.shape[0]
    if transform is None:
        return float(np.trace(mat))
    if transform.channels != c:
        raise ShapeMismatch(f"transform targets {transform.channels} channels, matrix has {c}")
    if transform.is_index_based:
        idx = transform.index_map()
        return float(mat[idx, np.arange(c)].sum())
    if teacher is None or student is None:
        raise ConfigError(f"{transform.kind} transforms need teacher and student features to score")
    metric = m.metric if isinstance(m, ConsistencyMatrix) else ConsistencyMetric()
    moved = transform.apply_matrix(_as_matrix(teacher))
    return float(np.trace(consistency_matrix(moved, student, metric).m))
