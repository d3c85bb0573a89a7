"""``kcd`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal error.
Failures print a single ``kcd: error: <Category>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .activations import (
    ActivationTensor,
    PooledActivations,
    global_average_pool,
    load_activation_set,
    load_manifest,
    read_labels,
    read_npy,
    write_labels,
    write_npy,
)
from .analysis import channel_overlap, class_average_activations, feature_distance_report
from .consistency import ConsistencyMatrix, ConsistencyMetric, consistency_matrix, consistency_score
from .errors import ConfigError, IoError, KcdError, ShapeMismatch
from .learned import FitConfig, fit_linear_transform, fit_residual_transform
from .matching import PerClassTransformSet, derive_transform, load_any_transform, per_class_transforms
from .report import file_sha256, provenance, write_curves_csv, write_json, write_run_report

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("kcd")


def _threads(args) -> int:
    if args.threads:
        return max(1, args.threads)
    env = os.environ.get("KCD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"KCD_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _out(args, default=None) -> Path:
    if args.out is None:
        if default is None:
            raise ConfigError("--out is required")
        return Path(default)
    return Path(args.out)


def _load_pooled(path, split=None, layer=None):
    """Pooled features and (if a manifest) labels from an NPY tensor or a manifest."""
    path = Path(path)
    if path.suffix in (".toml", ".json"):
        return load_activation_set(load_manifest(path), split, layer)
    return global_average_pool(read_npy(path)), None


def _inputs(*paths):
    return [p for p in paths if p is not None]


def _write_provenance(target: Path, args, inputs, **extra):
    # output location, thread count and verbosity never change artifact bytes
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "threads", "log_level")}
    rec = provenance(config, inputs, **extra)
    dest = target / "provenance.json" if target.is_dir() else target.with_name(target.name + ".provenance.json")
    write_json(rec, dest)


def _write_pooled(pooled, path):
    write_npy(ActivationTensor(pooled.data.reshape(pooled.data.shape + (1, 1))), path)


# -- subcommands -------------------------------------------------------------


def cmd_synth(args):
    from .lab.data import GenSpec, make_synthetic_dataset

    spec = GenSpec(
        classes=args.classes,
        d=args.d,
        clusters_per_class=args.clusters,
        noise=args.noise,
        n=args.n,
        seed=args.seed,
        center_scale=args.center_scale,
        test_fraction=args.test_fraction,
    )
    data = make_synthetic_dataset(spec)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out)
    _write_provenance(out, args, [], dataset_sha256=data.digest())
    print(out)


def save_dataset(data, out: Path):
    np.save(out / "inputs.npy", data.inputs)
    write_labels(data.labels, out / "labels.npy")
    write_labels(data.train_idx, out / "train_idx.npy")
    write_labels(data.test_idx, out / "test_idx.npy")
    write_json({"gen_spec": asdict(data.gen_spec), "sha256": data.digest()}, out / "spec.json")


def load_dataset(path):
    from .lab.data import Dataset, GenSpec

    path = Path(path)
    try:
        meta = json.loads((path / "spec.json").read_text())
        inputs = np.load(path / "inputs.npy", allow_pickle=False)
    except OSError as exc:
        raise IoError(f"cannot read dataset in {path}: {exc}") from exc
    return Dataset(
        inputs,
        read_labels(path / "labels.npy"),
        read_labels(path / "train_idx.npy"),
        read_labels(path / "test_idx.npy"),
        GenSpec(**meta["gen_spec"]),
    )


def _train_config(args):
    from .lab.train import TrainConfig

    milestones = [int(m) for m in args.milestones.split(",") if m] if args.milestones else []
    return TrainConfig(
        epochs=args.epochs, lr=args.lr, lr_milestones=milestones, lr_gamma=args.gamma,
        batch_size=args.batch_size, seed=args.seed,
    )


def cmd_train(args):
    """Train a classifier on a synthesized dataset and dump its hidden activations."""
    from .lab.mlp import forward_with_activations, init_model
    from .lab.train import train_classifier
    from .plotting import plot_training_curves

    data = load_dataset(args.data)
    spec = data.gen_spec
    init = init_model(args.arch, args.init_seed, spec.d, spec.classes, args.width)
    history: list = []
    model = train_classifier(init, data, _train_config(args), history)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.npz")
    records = [asdict(r) for r in history]
    write_curves_csv(records, out / "curves.csv")
    plot_training_curves({args.arch: records}, out / "curves.png")

    lines = [f"dataset_seed = {spec.seed}", ""]
    for split, idx in (("train", data.train_idx), ("test", data.test_idx)):
        _, acts = forward_with_activations(model, data.inputs[idx])
        write_labels(data.labels[idx], out / f"labels_{split}.npy")
        for k, a in enumerate(acts):
            name = f"acts_{split}_h{k}.npy"
            write_npy(ActivationTensor(a.reshape(a.shape + (1, 1))), out / name)
            lines += [
                "[[entries]]",
                f'tensor = "{name}"',
                f'labels = "labels_{split}.npy"',
                f'split = "{split}"',
                f'layer = "h{k}"',
                "",
            ]
    (out / "manifest.toml").write_text("\n".join(lines))
    _write_provenance(out, args, [Path(args.data) / "inputs.npy"], model_sha256=model.digest())
    print(out)


def cmd_pool(args):
    if args.manifest:
        pooled, labels = load_activation_set(load_manifest(args.manifest), args.split, args.layer)
        inputs = [args.manifest]
    else:
        if not args.inputs:
            raise ConfigError("give --inputs or --manifest")
        parts = [global_average_pool(read_npy(p)) for p in args.inputs]
        if len({p.channels for p in parts}) != 1:
            raise ShapeMismatch("inputs have different channel counts")
        pooled = PooledActivations(np.concatenate([p.data for p in parts]), parts[0].source_shape)
        labels, inputs = None, args.inputs
    out = _out(args)
    _write_pooled(pooled, out)
    if labels is not None:
        write_labels(labels, out.with_name(out.stem + "_labels.npy"))
    _write_provenance(out, args, inputs)
    print(out)


def cmd_consistency(args):
    t, _ = _load_pooled(args.teacher, args.split, args.teacher_layer)
    s, _ = _load_pooled(args.student, args.split, args.student_layer)
    m = consistency_matrix(t, s, ConsistencyMetric(args.metric, args.epsilon), threads=_threads(args))
    out = _out(args)
    m.save(out)
    _write_provenance(out, args, [args.teacher, args.student], gamma_identity=consistency_score(m))
    print(f"gamma_identity={consistency_score(m)!r}")


def cmd_match(args):
    labels = None
    if args.matrix:
        m = ConsistencyMatrix.load(args.matrix)
        inputs = [args.matrix]
    elif args.teacher and args.student:
        t, labels = _load_pooled(args.teacher, args.split, args.teacher_layer)
        s, _ = _load_pooled(args.student, args.split, args.student_layer)
        m = consistency_matrix(t, s, args.metric, threads=_threads(args))
        inputs = [args.teacher, args.student]
    else:
        raise ConfigError("give --matrix or both --teacher and --student")
    out = _out(args)
    if args.k_partitions > 1:
        if args.matrix:
            raise ConfigError("per-class transforms need --teacher/--student features, not a matrix")
        if args.labels:
            labels = read_labels(args.labels)
        if labels is None:
            raise ConfigError("per-class transforms need --labels")
        tset = per_class_transforms(t, s, labels, args.k_partitions, args.metric, args.strategy)
        tset.save(out)
        _write_provenance(out, args, inputs)
        print(f"partitions={tset.k_partitions}")
        return
    t_ = derive_transform(m, args.strategy, args.seed)
    t_.provenance["sources"] = {str(p): file_sha256(p) for p in inputs}
    t_.save(out)
    gamma = consistency_score(m, t_)
    _write_provenance(out, args, inputs, gamma_identity=consistency_score(m), gamma_transformed=gamma)
    mapping = t_.index_map().tolist()
    print(f"map={mapping} gamma_identity={consistency_score(m)!r} gamma={gamma!r}")


def cmd_apply(args):
    tr = load_any_transform(args.transform)
    x = read_npy(args.tensor)
    if isinstance(tr, PerClassTransformSet):
        if not args.labels:
            raise ConfigError("per-class transforms need --labels")
        data = tr.apply_matrix(x.data, read_labels(args.labels)).astype(x.dtype)
        y = ActivationTensor(data)
    else:
        from .transforms import apply_transform

        y = apply_transform(tr, x)
    out = _out(args)
    write_npy(y, out)
    _write_provenance(out, args, _inputs(args.transform, args.tensor, args.labels))
    print(out)


def cmd_learn_transform(args):
    t, _ = _load_pooled(args.teacher, args.split, args.teacher_layer)
    s, _ = _load_pooled(args.student, args.split, args.student_layer)
    cfg = FitConfig(
        ridge_lambda=args.ridge_lambda, lr=args.lr, epochs=args.epochs, hidden=args.hidden, seed=args.seed
    )
    tr = fit_linear_transform(t, s, cfg) if args.kind == "fc" else fit_residual_transform(t, s, cfg)
    out = _out(args)
    tr.save(out)
    _write_provenance(out, args, [args.teacher, args.student])
    key = "residual_sq" if args.kind == "fc" else "final_mse"
    print(f"{key}={tr.provenance[key]!r}")


def _labelled_pair(args):
    t, t_labels = _load_pooled(args.teacher, args.split, args.teacher_layer)
    s, s_labels = _load_pooled(args.student, args.split, args.student_layer)
    labels = read_labels(args.labels) if args.labels else (t_labels if t_labels is not None else s_labels)
    if args.transform:
        tr = load_any_transform(args.transform)
        if isinstance(tr, PerClassTransformSet):
            if labels is None:
                raise ConfigError("per-class transforms need labels")
            t = type(t)(tr.apply_matrix(t.data, labels), t.source_shape)
        else:
            t = type(t)(tr.apply_matrix(t.data), t.source_shape)
    return t, s, labels


def cmd_overlap(args):
    from .plotting import plot_class_profiles, plot_overlap

    t, s, labels = _labelled_pair(args)
    if labels is None:
        raise ConfigError("overlap needs --labels (or manifests carrying labels)")
    ks = [int(k) for k in args.k.split(",") if k]
    prof_t = class_average_activations(t, labels)
    prof_s = class_average_activations(s, labels)
    rep = channel_overlap(prof_t, prof_s, ks)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "overlap.csv")
    prof_t.write_csv(out / "profile_teacher.csv")
    prof_s.write_csv(out / "profile_student.csv")
    write_json(rep.summary(), out / "overlap_summary.json")
    plot_overlap(ks, {"teacher vs student": rep.mean}, out / "overlap.png")
    plot_class_profiles({"teacher": prof_t.as_matrix(), "student": prof_s.as_matrix()}, out / "class_profiles.png")
    _write_provenance(out, args, _inputs(args.teacher, args.student, args.labels, args.transform))
    print(" ".join(f"top{k}={rep.mean[k]!r}" for k in ks))


def cmd_distance(args):
    t, s, _ = _labelled_pair(args)
    rep = feature_distance_report(t, s)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    write_json(rep, out / "distance.json")
    _write_provenance(out, args, _inputs(args.teacher, args.student, args.transform))
    print(f"mean_l2={rep['mean_l2']!r} mean_kl={rep['mean_kl']!r}")


def load_run_config(path):
    from .lab.pipeline import RunConfig

    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(raw) if path.suffix == ".json" else tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: unparseable config: {exc}") from exc
    return RunConfig.from_dict(doc)


def cmd_distill_run(args):
    from .lab.mlp import ModelWeights
    from .lab.pipeline import run_algorithm1
    from .lab.reference import reference_config

    if args.config and args.reference:
        raise ConfigError("give either --config or --reference")
    if args.config:
        cfg = load_run_config(args.config)
    elif args.reference:
        cfg = reference_config(args.seed)
    else:
        raise ConfigError("give --config or --reference")
    if args.strategy:
        cfg = replace(cfg, strategy=args.strategy)
    if args.reinit_seed is not None:
        cfg = replace(cfg, reinit_seed=args.reinit_seed)
    teacher = ModelWeights.load(args.teacher_model) if args.teacher_model else None
    report = run_algorithm1(cfg, teacher=teacher)
    out = _out(args)
    write_run_report(report, out, figures=not args.no_figures)
    _write_provenance(out, args, _inputs(args.config, args.teacher_model), run_config=cfg.to_dict())
    g = report.gamma
    flag = " init_mismatch" if report.init_mismatch else ""
    print(
        f"gamma_identity={g['identity']!r} gamma_transformed={g['transformed']!r} "
        f"distilled_test_acc={report.accuracy['distilled_test']!r}{flag}"
    )


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors become a single ``ConfigError`` line with exit code 2."""

    def error(self, message):
        self.exit(2, f"kcd: error: ConfigError: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: KCD_THREADS or all cores)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None)
    common.add_argument("--log-level", default="WARNING")

    features = _Parser(add_help=False)
    features.add_argument("--teacher", required=True, help="NPY tensor or manifest")
    features.add_argument("--student", required=True, help="NPY tensor or manifest")
    features.add_argument("--split", default="train", help="manifest split tag")
    features.add_argument("--teacher-layer", default=None, help="manifest layer tag for the teacher")
    features.add_argument("--student-layer", default=None, help="manifest layer tag for the student")

    parser = _Parser(prog="kcd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kcd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a toy dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--center-scale", type=float, default=1.0)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a classifier and dump activations")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="teacher-deep")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--milestones", default="")
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pool", parents=[common], help="global-average-pool activation tensors")
    p.add_argument("--inputs", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--split", default="train")
    p.add_argument("--layer", default=None)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("consistency", parents=[common, features], help="teacher/student consistency matrix")
    p.add_argument("--metric", default="correlation")
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("match", parents=[common], help="derive a channel transformation")
    p.add_argument("--matrix")
    p.add_argument("--teacher")
    p.add_argument("--student")
    p.add_argument("--split", default="train")
    p.add_argument("--teacher-layer", default=None)
    p.add_argument("--student-layer", default=None)
    p.add_argument("--metric", default="correlation")
    p.add_argument("--strategy", default="bipartite", choices=["identity", "greedy", "bipartite", "random"])
    p.add_argument("--k-partitions", type=int, default=1)
    p.add_argument("--labels")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("apply", parents=[common], help="apply a transformation to a tensor")
    p.add_argument("--transform", required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--labels")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("learn-transform", parents=[common, features], help="fit a learned transformation")
    p.add_argument("--kind", choices=["fc", "res"], default="fc")
    p.add_argument("--ridge-lambda", type=float, default=1e-6)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--hidden", type=int, default=None)
    p.set_defaults(func=cmd_learn_transform)

    for name, func, helptext in (
        ("overlap", cmd_overlap, "top-k channel overlap per class"),
        ("distance", cmd_distance, "teacher/student feature distances"),
    ):
        p = sub.add_parser(name, parents=[common, features], help=helptext)
        p.add_argument("--labels")
        p.add_argument("--transform")
        if name == "overlap":
            p.add_argument("--k", default="10,20,50")
        p.set_defaults(func=func)

    p = sub.add_parser("distill", help="knowledge consistent distillation runs")
    dsub = p.add_subparsers(dest="distill_command", required=True)
    r = dsub.add_parser("run", parents=[common], help="run the full procedure and write a report")
    r.add_argument("--config")
    r.add_argument("--reference", action="store_true", help="use the built-in reference toy config (seed = --seed)")
    r.add_argument("--strategy", choices=["identity", "greedy", "bipartite", "random", "fc", "res"])
    r.add_argument("--reinit-seed", type=int, default=None, help="mismatched-initialization ablation")
    r.add_argument("--teacher-model")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_distill_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(name)s: %(message)s")
    try:
        with threadpool_limits(1):
            args.func(args)
    except KcdError as exc:
        msg = " ".join(str(exc).split())
        print(f"kcd: error: {exc.category}: {msg}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        msg = " ".join(str(exc).split())
        print(f"kcd: error: InternalError: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
