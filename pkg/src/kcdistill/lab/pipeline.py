"""End-to-end knowledge consistent distillation on the toy bench.

Stages: train the student from theta0 with cross-entropy only, measure
channel consistency against the teacher on the training split, derive a
channel transform, reinitialize from theta0 and distill against the
transformed teacher.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .. import __version__
from ..analysis import channel_overlap, class_average_activations, feature_distance_report
from ..consistency import ConsistencyMatrix, consistency_matrix, consistency_score
from ..errors import ConfigError
from ..learned import FitConfig, fit_linear_transform, fit_residual_transform
from ..matching import PerClassTransformSet, derive_transform, per_class_transforms
from ..transforms import Transformation, identity_transform
from .data import Dataset, GenSpec, make_synthetic_dataset
from .losses import KdConfig, LayerPair
from .mlp import ModelWeights, forward_with_activations, init_model
from .train import DistillConfig, TrainConfig, distill_train, evaluate, train_classifier

log = logging.getLogger(__name__)

STRATEGIES = ("identity", "greedy", "bipartite", "random", "fc", "res")


@dataclass
class RunConfig:
    data: GenSpec = field(default_factory=GenSpec)
    width: int = 32
    teacher_arch: str = "teacher-deep"
    teacher_seed: int = 1000
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_arch: str = "student-small"
    student_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    metric: str = "correlation"
    strategy: str = "bipartite"
    k_partitions: int = 1
    pairs: list[LayerPair] = field(default_factory=lambda: [LayerPair()])
    kd: KdConfig | None = None
    dynamic_refresh_epochs: int | None = None
    reinit_seed: int | None = None
    random_seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)
    overlap_k: tuple[int, ...] = (2, 4, 8)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.k_partitions < 1:
            raise ConfigError("k_partitions must be >= 1")
        if self.k_partitions > 1 and self.strategy not in ("greedy", "bipartite"):
            raise ConfigError("per-class transforms need the greedy or bipartite strategy")
        self.overlap_k = tuple(int(k) for k in self.overlap_k)

    @property
    def init_mismatch(self) -> bool:
        return self.reinit_seed is not None and self.reinit_seed != self.student_seed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        kw: dict[str, Any] = dict(doc)
        try:
            if "data" in kw:
                kw["data"] = GenSpec(**kw["data"])
            for key in ("train", "teacher_train"):
                if key in kw:
                    kw[key] = TrainConfig(**kw[key])
            if "fit" in kw:
                kw["fit"] = FitConfig(**kw["fit"])
            if "pairs" in kw:
                kw["pairs"] = [LayerPair(**p) for p in kw["pairs"]]
            if kw.get("kd"):
                kw["kd"] = KdConfig(**kw["kd"])
            else:
                kw["kd"] = None
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from exc


@dataclass
class RunReport:
    config: dict
    seeds: dict
    init_mismatch: bool
    gamma: dict
    accuracy: dict
    distances: dict
    overlap: dict
    transform: dict
    kd: dict | None
    curves: dict
    provenance: dict
    # in-memory artifacts, not serialized
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("artifacts")
        return d


def _feats(model: ModelWeights, x: np.ndarray, layer: int) -> np.ndarray:
    _, acts = forward_with_activations(model, x)
    return acts[layer % len(acts)]


def prepare_teacher(cfg: RunConfig, data: Dataset, history: list | None = None) -> ModelWeights:
    d, classes = cfg.data.d, cfg.data.classes
    init = init_model(cfg.teacher_arch, cfg.teacher_seed, d, classes, cfg.width)
    return train_classifier(init, data, cfg.teacher_train, history)


def derive_run_transform(cfg: RunConfig, t_feats, s_feats, labels, m: ConsistencyMatrix):
    c = m.channels
    if cfg.strategy in ("fc", "res"):
        fit = fit_linear_transform if cfg.strategy == "fc" else fit_residual_transform
        return fit(t_feats, s_feats, cfg.fit)
    if cfg.k_partitions > 1:
        return per_class_transforms(t_feats, s_feats, labels, cfg.k_partitions, cfg.metric, cfg.strategy)
    if cfg.strategy == "identity":
        return identity_transform(c)
    return derive_transform(m, cfg.strategy, cfg.random_seed)


def _gamma(m: ConsistencyMatrix, transform, t_feats, s_feats, labels) -> float:
    if isinstance(transform, PerClassTransformSet):
        moved = transform.apply_matrix(t_feats, labels)
        return float(np.trace(consistency_matrix(moved, s_feats, m.metric).m))
    return consistency_score(m, transform, teacher=t_feats, student=s_feats)


def _apply(transform, feats, labels):
    if isinstance(transform, PerClassTransformSet):
        return transform.apply_matrix(feats, labels)
    return transform.apply_matrix(feats)


def _transform_record(transform) -> dict:
    if isinstance(transform, PerClassTransformSet):
        return {
            "kind": "per_class",
            "k_partitions": transform.k_partitions,
            "class_to_partition": {str(k): v for k, v in sorted(transform.class_to_partition.items())},
            "maps": [None if t.map is None else t.map.tolist() for t in transform.transforms],
        }
    rec = {"kind": transform.kind, "channels": transform.channels, "provenance": transform.provenance}
    if transform.map is not None:
        rec["map"] = transform.map.tolist()
    return rec


def run_algorithm1(
    cfg: RunConfig,
    teacher: ModelWeights | None = None,
    data: Dataset | None = None,
    baseline: ModelWeights | None = None,
    baseline_history: list | None = None,
) -> RunReport:
    """Run the seven steps of knowledge consistent distillation and collect a report.

    ``teacher``, ``data`` and ``baseline`` may be passed in to share work
    across strategy sweeps; they must be what this config would produce.
    """
    data = data if data is not None else make_synthetic_dataset(cfg.data)
    teacher_history: list = []
    if teacher is None:
        teacher = prepare_teacher(cfg, data, teacher_history)

    theta0 = init_model(cfg.student_arch, cfg.student_seed, cfg.data.d, cfg.data.classes, cfg.width)
    if baseline is None:
        baseline_history = []
        baseline = train_classifier(theta0, data, cfg.train, baseline_history)
    baseline_history = baseline_history or []

    pair = cfg.pairs[0]
    x_tr, y_tr = data.x_train, data.y_train
    t_tr = _feats(teacher, x_tr, pair.teacher_layer)
    s_tr = _feats(baseline, x_tr, pair.student_layer)
    m = consistency_matrix(t_tr, s_tr, cfg.metric)
    transform = derive_run_transform(cfg, t_tr, s_tr, y_tr, m)
    gamma_identity = consistency_score(m)
    gamma_t = _gamma(m, transform, t_tr, s_tr, y_tr)

    if cfg.init_mismatch:
        restart = init_model(cfg.student_arch, cfg.reinit_seed, cfg.data.d, cfg.data.classes, cfg.width)
    else:
        restart = theta0
    transforms = [transform] + [None] * (len(cfg.pairs) - 1)
    dcfg = DistillConfig(
        pairs=list(cfg.pairs),
        kd=cfg.kd,
        transforms=transforms,
        dynamic_refresh_epochs=cfg.dynamic_refresh_epochs,
        refresh_metric=cfg.metric,
        refresh_strategy=cfg.strategy if cfg.strategy in ("greedy", "bipartite") else "bipartite",
        train=cfg.train,
    )
    distill_history: list = []
    student = distill_train(restart, teacher, data, dcfg, distill_history)

    x_te, y_te = data.x_test, data.y_test
    t_te = _feats(teacher, x_te, pair.teacher_layer)
    s_te = _feats(baseline, x_te, pair.student_layer)
    d_te = _feats(student, x_te, pair.student_layer)
    distances = {
        "baseline_identity": feature_distance_report(t_te, s_te),
        "baseline_transformed": feature_distance_report(_apply(transform, t_te, y_te), s_te),
        "distilled_transformed": feature_distance_report(_apply(transform, t_te, y_te), d_te),
    }

    prof_s = class_average_activations(s_tr, y_tr)
    prof_t = class_average_activations(t_tr, y_tr)
    prof_tt = class_average_activations(_apply(transform, t_tr, y_tr), y_tr)
    ks = [k for k in cfg.overlap_k if k <= m.channels]
    overlap = {
        "identity": channel_overlap(prof_t, prof_s, ks).summary()["mean_overlap"],
        "transformed": channel_overlap(prof_tt, prof_s, ks).summary()["mean_overlap"],
        "split": "train",
    }

    accuracy = {
        "teacher_test": evaluate(teacher, x_te, y_te)[1],
        "baseline_test": evaluate(baseline, x_te, y_te)[1],
        "distilled_test": evaluate(student, x_te, y_te)[1],
        "teacher_train": evaluate(teacher, x_tr, y_tr)[1],
        "baseline_train": evaluate(baseline, x_tr, y_tr)[1],
        "distilled_train": evaluate(student, x_tr, y_tr)[1],
    }
    seeds = {
        "dataset": cfg.data.seed,
        "teacher_init": cfg.teacher_seed,
        "student_init": cfg.student_seed,
        "reinit": cfg.reinit_seed if cfg.init_mismatch else cfg.student_seed,
        "train": cfg.train.seed,
        "teacher_train": cfg.teacher_train.seed,
    }
    report = RunReport(
        config=cfg.to_dict(),
        seeds=seeds,
        init_mismatch=cfg.init_mismatch,
        gamma={"identity": gamma_identity, "transformed": gamma_t, "metric": m.metric.kind, "samples": m.sample_count},
        accuracy=accuracy,
        distances=distances,
        overlap=overlap,
        transform=_transform_record(transform),
        kd=asdict(cfg.kd) if cfg.kd else None,
        curves={
            "teacher": [asdict(r) for r in teacher_history],
            "baseline": [asdict(r) for r in baseline_history],
            "distilled": [asdict(r) for r in distill_history],
        },
        provenance={
            "tool_version": __version__,
            "dataset_sha256": data.digest(),
            "teacher_sha256": teacher.digest(),
            "theta0_sha256": theta0.digest(),
            "baseline_sha256": baseline.digest(),
            "distilled_sha256": student.digest(),
        },
    )
    report.artifacts = {
        "data": data,
        "teacher": teacher,
        "baseline": baseline,
        "student": student,
        "matrix": m,
        "transform": transform,
        "teacher_feats": t_tr,
        "student_feats": s_tr,
    }
    log.info(
        "strategy %s: gamma %.4f -> %.4f, test acc baseline %.4f distilled %.4f",
        cfg.strategy, gamma_identity, gamma_t, accuracy["baseline_test"], accuracy["distilled_test"],
    )
    return report
