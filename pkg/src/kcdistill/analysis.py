"""Channel-overlap and feature-distance diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .activations import PooledActivations
from .errors import ConfigError, EmptyClass, ShapeMismatch


@dataclass
class ClassActivationProfile:
    per_class: dict[int, np.ndarray]
    sample_counts: dict[int, int] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    @property
    def channels(self) -> int:
        return len(next(iter(self.per_class.values())))

    def as_matrix(self) -> np.ndarray:
        return np.stack([self.per_class[k] for k in self.classes])

    def write_csv(self, path) -> None:
        """One row per class: label, count, then one column per channel."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "count"] + [f"ch{j}" for j in range(self.channels)])
            for k in self.classes:
                w.writerow([k, self.sample_counts.get(k, "")] + [repr(float(v)) for v in self.per_class[k]])


@dataclass
class OverlapReport:
    k_values: list[int]
    mean: dict[int, float]
    per_class: dict[int, dict[int, float]]

    def rows(self):
        for k in self.k_values:
            for label, ratio in sorted(self.per_class[k].items()):
                yield k, label, ratio

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "label", "overlap"])
            for k, label, ratio in self.rows():
                w.writerow([k, label, repr(ratio)])

    def summary(self) -> dict:
        return {"k_values": list(self.k_values), "mean_overlap": {str(k): v for k, v in self.mean.items()}}


def _matrix(x) -> np.ndarray:
    return x.data if isinstance(x, PooledActivations) else np.asarray(x, dtype=np.float64)


def class_average_activations(pooled, labels, classes=None) -> ClassActivationProfile:
    """Per-class mean of pooled rows; ``classes`` lists labels that must be present."""
    x = _matrix(pooled)
    labels = np.asarray(labels)
    if labels.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {x.shape[0]} rows")
    wanted = np.unique(labels) if classes is None else np.asarray(classes)
    per_class, counts = {}, {}
    for cls in wanted:
        rows = labels == cls
        if not rows.any():
            raise EmptyClass(f"class {cls} has no samples")
        per_class[int(cls)] = x[rows].mean(axis=0)
        counts[int(cls)] = int(rows.sum())
    return ClassActivationProfile(per_class, counts)


def top_k_channels(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values breaks ties towards the lower index
    return np.argsort(-np.asarray(values), kind="stable")[:k]


def channel_overlap(profile_t: ClassActivationProfile, profile_s: ClassActivationProfile, k) -> OverlapReport:
    """Fraction of shared top-k channel indices per class, averaged over classes."""
    k_values = [int(v) for v in (k if np.iterable(k) else [k])]
    if profile_t.classes != profile_s.classes:
        raise ShapeMismatch("profiles cover different classes")
    c = profile_t.channels
    if profile_s.channels != c:
        raise ShapeMismatch(f"profiles have {c} and {profile_s.channels} channels")
    per_class: dict[int, dict[int, float]] = {}
    mean = {}
    for kv in k_values:
        if not 1 <= kv <= c:
            raise ConfigError(f"k={kv} must lie in [1, {c}]")
        ratios = {}
        for cls in profile_t.classes:
            a = top_k_channels(profile_t.per_class[cls], kv)
            b = top_k_channels(profile_s.per_class[cls], kv)
            ratios[cls] = len(np.intersect1d(a, b)) / kv
        per_class[kv] = ratios
        mean[kv] = float(np.mean(list(ratios.values())))
    return OverlapReport(k_values, mean, per_class)


def feature_distance_report(acts_t, acts_s) -> dict:
    """Mean per-sample Euclidean distance and channel-softmax KL(teacher || student)."""
    t, s = _matrix(acts_t), _matrix(acts_s)
    if t.shape != s.shape or t.ndim != 2:
        raise ShapeMismatch(f"teacher {t.shape} and student {s.shape} must be equal b x c")
    l2 = np.sqrt(np.einsum("bc,bc->b", t - s, t - s))
    log_p = log_softmax(t, axis=1)
    log_q = log_softmax(s, axis=1)
    kl = np.maximum(np.sum(np.exp(log_p) * (log_p - log_q), axis=1), 0.0)
    return {"mean_l2": float(l2.mean()), "mean_kl": float(kl.mean()), "samples": int(t.shape[0])}
