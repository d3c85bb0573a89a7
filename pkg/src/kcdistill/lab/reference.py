"""The reference toy configuration used by the acceptance suite and ``kcd distill run --reference``.

The student's schedule is deliberately short: on this bench a fully
converged one-hidden-layer student gains nothing from feature hints, so the
comparison between transforms is made in the under-trained regime where the
teacher's features still carry information the student has not yet found.
"""

from __future__ import annotations

from .data import GenSpec, make_synthetic_dataset
from .losses import LayerPair
from .mlp import init_model
from .pipeline import RunConfig, prepare_teacher
from .train import TrainConfig, train_classifier


def reference_config(seed: int = 0, strategy: str = "bipartite", **overrides) -> RunConfig:
    cfg = dict(
        data=GenSpec(classes=4, d=16, clusters_per_class=4, noise=0.5, n=4000, seed=seed),
        width=16,
        teacher_arch="teacher-deep",
        teacher_seed=1000 + seed,
        teacher_train=TrainConfig(epochs=30, lr=0.1, batch_size=64, seed=seed),
        student_arch="student-small",
        student_seed=seed,
        train=TrainConfig(epochs=3, lr=0.03, batch_size=64, seed=10_000 + seed),
        metric="correlation",
        strategy=strategy,
        pairs=[LayerPair(-1, -1, 0.2)],
    )
    cfg.update(overrides)
    return RunConfig(**cfg)


def analysis_pair(seed: int = 0):
    """Teacher and a fully trained baseline student on the reference data.

    Channel-overlap and distance diagnostics compare converged models, so the
    student here uses the teacher's full-length schedule.
    """
    cfg = reference_config(seed)
    data = make_synthetic_dataset(cfg.data)
    teacher = prepare_teacher(cfg, data)
    theta0 = init_model(cfg.student_arch, cfg.student_seed, cfg.data.d, cfg.data.classes, cfg.width)
    student = train_classifier(theta0, data, cfg.teacher_train)
    return data, teacher, student
