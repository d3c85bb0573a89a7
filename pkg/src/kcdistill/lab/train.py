"""Deterministic SGD training with optional (knowledge-consistent) distillation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from ..consistency import consistency_matrix
from ..errors import ConfigError, DivergenceError, ShapeMismatch
from ..matching import PerClassTransformSet, derive_transform
from ..transforms import Transformation
from .data import Dataset
from .losses import KdConfig, LayerPair, LossConfig, cross_entropy, loss_terms
from .mlp import ModelWeights, backward, forward_with_activations

log = logging.getLogger(__name__)

RECORDING_SUBSET = 512


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    lr_milestones: tuple[int, ...] = ()
    lr_gamma: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigError("epochs and lr must be >= 0 and batch_size >= 1")
        if not 0 < self.lr_gamma <= 1:
            raise ConfigError("lr_gamma must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)


@dataclass
class DistillConfig:
    pairs: list[LayerPair] = field(default_factory=lambda: [LayerPair()])
    kd: KdConfig | None = None
    # one entry per pair; None means identity
    transforms: list = field(default_factory=list)
    dynamic_refresh_epochs: int | None = None
    refresh_metric: str = "correlation"
    refresh_strategy: str = "bipartite"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.dynamic_refresh_epochs is not None and self.dynamic_refresh_epochs < 1:
            raise ConfigError("dynamic_refresh_epochs must be >= 1")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(list(self.pairs), self.kd)

    def transform_for(self, p: int):
        return self.transforms[p] if p < len(self.transforms) else None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    batch_loss: float
    l_condis: float
    l_kd: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    transform_digest: str = ""


def evaluate(model: ModelWeights, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    logits, _ = forward_with_activations(model, x)
    loss, _ = cross_entropy(logits, y)
    return loss, float(np.mean(np.argmax(logits, axis=1) == y))


def _transform_digest(transforms) -> str:
    h = hashlib.sha256()
    for t in transforms:
        items = t.transforms if isinstance(t, PerClassTransformSet) else [t]
        for tr in items:
            if tr is None:
                h.update(b"identity")
            elif tr.map is not None:
                h.update(tr.map.tobytes())
            else:
                for k in sorted(tr.weights):
                    h.update(tr.weights[k].tobytes())
    return h.hexdigest()[:16]


def transform_features(transform, feats: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
    if transform is None:
        return feats
    if isinstance(transform, PerClassTransformSet):
        if labels is None:
            raise ConfigError("per-class transforms need labels")
        return transform.apply_matrix(feats, labels)
    return transform.apply_matrix(feats)


def _teacher_targets(teacher, x, y, cfg: DistillConfig, transforms):
    logits_t, acts_t = forward_with_activations(teacher, x)
    targets = []
    for p, pair in enumerate(cfg.pairs):
        feats = acts_t[pair.teacher_layer % len(acts_t)]
        targets.append(transform_features(transforms[p], feats, y))
    return logits_t, targets


def _check_pairs(student: ModelWeights, teacher: ModelWeights | None, cfg: DistillConfig):
    if teacher is None:
        return
    for pair in cfg.pairs:
        try:
            wt = teacher.hidden_widths[pair.teacher_layer]
            ws = student.hidden_widths[pair.student_layer]
        except IndexError:
            raise ConfigError(f"layer pair {pair} out of range") from None
        if wt != ws:
            raise ShapeMismatch(f"layer pair {pair}: teacher width {wt} != student width {ws}")


def loss_and_grads(student, x, y, targets, logits_t, loss_cfg: LossConfig):
    """Total distillation loss at ``student`` and its gradient as a flat parameter list."""
    logits_s, acts_s = forward_with_activations(student, x)
    losses, d_logits, d_acts = loss_terms(acts_s, targets, logits_s, logits_t, y, loss_cfg)
    gw, gb = backward(student, x, acts_s, d_logits, d_acts)
    grads = []
    for w, b in zip(gw, gb):
        grads += [w, b]
    return losses, grads


def distill_train(
    student_init: ModelWeights,
    teacher: ModelWeights | None,
    data: Dataset,
    cfg: DistillConfig,
    history: list | None = None,
) -> ModelWeights:
    """Train a student from ``student_init`` with Lcls + Lcondis (+ optional KD).

    The teacher is never updated.  Transforms stay fixed unless
    ``cfg.dynamic_refresh_epochs`` is set, in which case they are re-derived
    from the current student's features on a fixed recording subset.
    """
    tc = cfg.train
    loss_cfg = cfg.loss_config
    use_teacher = teacher is not None and loss_cfg.uses_teacher
    if not use_teacher:
        loss_cfg = LossConfig([LayerPair(alpha=0.0)], None)
    _check_pairs(student_init, teacher if use_teacher else None, cfg)

    student = student_init.copy()
    x_tr, y_tr = data.x_train, data.y_train
    x_te, y_te = data.x_test, data.y_test
    n = x_tr.shape[0]
    rng = np.random.default_rng(tc.seed)
    record_idx = np.sort(np.random.default_rng(tc.seed + 1).permutation(n)[: min(RECORDING_SUBSET, n)])

    transforms = [cfg.transform_for(p) for p in range(len(cfg.pairs))]
    if use_teacher:
        logits_t_all, targets_all = _teacher_targets(teacher, x_tr, y_tr, cfg, transforms)

    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            if use_teacher:
                targets = [t[idx] for t in targets_all]
                logits_t = logits_t_all[idx]
            else:
                targets, logits_t = [None], None
            losses, grads = loss_and_grads(student, x_tr[idx], y_tr[idx], targets, logits_t, loss_cfg)
            if not np.isfinite(losses["total"]):
                raise DivergenceError(f"non-finite loss at epoch {epoch}; lower the learning rate")
            if lr != 0:
                for p, g in zip(student.params(), grads):
                    p -= lr * g
            sums += (losses["total"], losses["l_condis"], losses["l_kd"])
            batches += 1

        if use_teacher and cfg.dynamic_refresh_epochs and (epoch + 1) % cfg.dynamic_refresh_epochs == 0:
            if epoch + 1 < tc.epochs:
                transforms = _refresh(student, teacher, x_tr[record_idx], cfg, transforms)
                logits_t_all, targets_all = _teacher_targets(teacher, x_tr, y_tr, cfg, transforms)

        if history is not None:
            tr_loss, tr_acc = evaluate(student, x_tr, y_tr)
            te_loss, te_acc = evaluate(student, x_te, y_te)
            mean = sums / max(batches, 1)
            history.append(
                EpochRecord(
                    epoch, lr, mean[0], mean[1], mean[2], tr_loss, tr_acc, te_loss, te_acc,
                    _transform_digest(transforms),
                )
            )
            log.debug("epoch %d lr %.4g loss %.4f test acc %.4f", epoch, lr, mean[0], te_acc)
    return student


def _refresh(student, teacher, x_rec, cfg: DistillConfig, transforms):
    _, acts_s = forward_with_activations(student, x_rec)
    _, acts_t = forward_with_activations(teacher, x_rec)
    out = []
    for p, pair in enumerate(cfg.pairs):
        old = transforms[p]
        if isinstance(old, PerClassTransformSet) or (isinstance(old, Transformation) and not old.is_index_based):
            # learned and per-class transforms are not refreshed
            out.append(old)
            continue
        m = consistency_matrix(
            acts_t[pair.teacher_layer % len(acts_t)],
            acts_s[pair.student_layer % len(acts_s)],
            cfg.refresh_metric,
        )
        out.append(derive_transform(m, cfg.refresh_strategy))
    return out


def train_classifier(
    init: ModelWeights, data: Dataset, cfg: TrainConfig, history: list | None = None
) -> ModelWeights:
    """Plain cross-entropy training; the same loop as ``distill_train`` without a teacher."""
    return distill_train(init, None, data, DistillConfig(train=cfg), history)
