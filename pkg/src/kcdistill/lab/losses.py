"""Classification, feature-distillation and soft-label losses with their gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from ..errors import ConfigError, ShapeMismatch


@dataclass(frozen=True)
class LayerPair:
    """Hidden-layer indices (negative counts from the last hidden layer) and loss weight."""

    teacher_layer: int = -1
    student_layer: int = -1
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("layer-pair weight alpha must be >= 0")


@dataclass(frozen=True)
class KdConfig:
    temperature: float = 4.0
    weight: float = 16.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("KD temperature must be > 0")
        if self.weight < 0:
            raise ConfigError("KD weight must be >= 0")


@dataclass
class LossConfig:
    pairs: list[LayerPair] = field(default_factory=lambda: [LayerPair()])
    kd: KdConfig | None = None

    @property
    def uses_features(self) -> bool:
        return any(p.alpha > 0 for p in self.pairs)

    @property
    def uses_teacher(self) -> bool:
        return self.uses_features or (self.kd is not None and self.kd.weight > 0)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    b = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def feature_mse(student: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if student.shape != target.shape:
        raise ShapeMismatch(f"paired features differ in shape: {student.shape} vs {target.shape}")
    diff = student - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def kd_loss(logits_s: np.ndarray, logits_t: np.ndarray, kd: KdConfig) -> tuple[float, np.ndarray]:
    """weight * T^2 * mean_b KL(softmax(z_t/T) || softmax(z_s/T))."""
    t = kd.temperature
    log_p = log_softmax(logits_t / t, axis=1)
    log_q = log_softmax(logits_s / t, axis=1)
    p = np.exp(log_p)
    b = logits_s.shape[0]
    kl = float(np.sum(p * (log_p - log_q)) / b)
    grad = kd.weight * t * (np.exp(log_q) - p) / b
    return kd.weight * t * t * max(kl, 0.0), grad


def loss_terms(student_acts, targets, logits_s, logits_t, labels, cfg: LossConfig):
    """All loss terms plus gradients w.r.t. student logits and paired hidden activations.

    ``targets[p]`` is the already-transformed teacher feature for ``cfg.pairs[p]``.
    """
    l_cls, d_logits = cross_entropy(logits_s, labels)
    d_acts: dict[int, np.ndarray] = {}
    l_condis = 0.0
    n_hidden = len(student_acts)
    for pair, target in zip(cfg.pairs, targets):
        if pair.alpha == 0:
            continue
        k = pair.student_layer % n_hidden
        value, grad = feature_mse(student_acts[k], target)
        l_condis += pair.alpha * value
        d_acts[k] = d_acts.get(k, 0.0) + pair.alpha * grad
    l_kd = 0.0
    if cfg.kd is not None and cfg.kd.weight > 0:
        l_kd, g = kd_loss(logits_s, logits_t, cfg.kd)
        d_logits = d_logits + g
    losses = {"l_cls": l_cls, "l_condis": l_condis, "l_kd": l_kd, "total": l_cls + l_condis + l_kd}
    return losses, d_logits, d_acts


def distill_losses(student_acts, teacher_acts, logits_s, logits_t, labels, cfg: LossConfig) -> dict:
    """Loss values only; ``teacher_acts`` holds one transformed target per layer pair."""
    for pair, target in zip(cfg.pairs, teacher_acts):
        k = pair.student_layer % len(student_acts)
        if np.shape(target) != student_acts[k].shape:
            raise ShapeMismatch(
                f"pair {pair}: teacher width {np.shape(target)} vs student {student_acts[k].shape}"
            )
    return loss_terms(student_acts, teacher_acts, logits_s, logits_t, labels, cfg)[0]


def class_probabilities(logits: np.ndarray) -> np.ndarray:
    return softmax(logits, axis=1)
