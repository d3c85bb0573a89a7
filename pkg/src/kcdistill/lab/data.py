"""Deterministic Gaussian-cluster classification data."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class GenSpec:
    classes: int = 4
    d: int = 16
    clusters_per_class: int = 2
    noise: float = 0.5
    n: int = 4000
    seed: int = 0
    center_scale: float = 1.0
    test_fraction: float = 0.5

    def validate(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.d < 1:
            raise ConfigError("input dimension must be >= 1")
        if self.n < self.classes:
            raise ConfigError("need at least one sample per class")
        if self.clusters_per_class < 1:
            raise ConfigError("clusters_per_class must be >= 1")
        if self.noise < 0 or self.center_scale <= 0:
            raise ConfigError("noise must be >= 0 and center_scale > 0")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        n_test = round(self.n * self.test_fraction)
        if n_test < 1 or n_test >= self.n:
            raise ConfigError("split leaves train or test empty")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    gen_spec: GenSpec

    @property
    def x_train(self):
        return self.inputs[self.train_idx]

    @property
    def y_train(self):
        return self.labels[self.train_idx]

    @property
    def x_test(self):
        return self.inputs[self.test_idx]

    @property
    def y_test(self):
        return self.labels[self.test_idx]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.inputs, self.labels, self.train_idx, self.test_idx):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def spec_dict(self) -> dict:
        return asdict(self.gen_spec)


def make_synthetic_dataset(spec: GenSpec | dict) -> Dataset:
    """Each class is a mixture of ``clusters_per_class`` isotropic Gaussians.

    Labels are assigned round-robin so classes are balanced; the train/test
    split is a seeded permutation.
    """
    if isinstance(spec, dict):
        try:
            spec = GenSpec(**spec)
        except TypeError as exc:
            raise ConfigError(f"bad dataset spec: {exc}") from exc
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.clusters_per_class
    centers = rng.normal(size=(spec.classes * k, spec.d)) * spec.center_scale
    labels = np.arange(spec.n, dtype=np.int64) % spec.classes
    cluster = rng.integers(k, size=spec.n)
    inputs = centers[labels * k + cluster] + spec.noise * rng.normal(size=(spec.n, spec.d))
    perm = rng.permutation(spec.n)
    n_test = round(spec.n * spec.test_fraction)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return Dataset(inputs, labels, train_idx, test_idx, spec)
