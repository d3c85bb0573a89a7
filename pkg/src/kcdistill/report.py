"""Serialization of run reports, CSV curves and provenance records."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IoError


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(obj, path) -> None:
    try:
        Path(path).write_text(dumps(obj))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(config: dict, inputs=(), **extra) -> dict:
    rec = {
        "tool": "kcdistill",
        "tool_version": __version__,
        "config": _jsonable(config),
        "inputs": {str(p): file_sha256(p) for p in inputs},
    }
    rec.update(extra)
    return rec


def write_curves_csv(records: list[dict], path) -> None:
    from .lab.train import EpochRecord

    names = [f.name for f in fields(EpochRecord)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in records:
            w.writerow([repr(r[n]) if isinstance(r[n], float) else r[n] for n in names])


def write_run_report(report, out_dir, figures: bool = True) -> dict[str, Path]:
    """Write report.json, per-run curve CSVs, the matrix and transform, and figures."""
    from . import plotting
    from .analysis import class_average_activations
    from .matching import PerClassTransformSet

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    doc = report.to_dict()
    write_json(doc, out / "report.json")
    written["report"] = out / "report.json"
    for name, records in report.curves.items():
        if records:
            p = out / f"curves_{name}.csv"
            write_curves_csv(records, p)
            written[f"curves_{name}"] = p

    arts = report.artifacts
    transform = arts.get("transform")
    if "matrix" in arts:
        arts["matrix"].save(out / "consistency.npy")
        written["matrix"] = out / "consistency.npy"
    if transform is not None and not isinstance(transform, PerClassTransformSet):
        transform.save(out / "transform.json")
        written["transform"] = out / "transform.json"

    if figures:
        plotting.plot_training_curves(report.curves, out / "curves.png")
        written["fig_curves"] = out / "curves.png"
        if "matrix" in arts:
            mapping = None
            if transform is not None and not isinstance(transform, PerClassTransformSet) and transform.is_index_based:
                mapping = transform.index_map()
            plotting.plot_consistency(arts["matrix"].m, out / "consistency.png", mapping, arts["matrix"].metric.kind)
            written["fig_consistency"] = out / "consistency.png"
        if "teacher_feats" in arts:
            y = arts["data"].y_train
            profiles = {
                "teacher": class_average_activations(arts["teacher_feats"], y).as_matrix(),
                "student": class_average_activations(arts["student_feats"], y).as_matrix(),
            }
            plotting.plot_class_profiles(profiles, out / "class_profiles.png")
            written["fig_profiles"] = out / "class_profiles.png"
    return written


def report_digest(out_dir) -> str:
    """Hash over every file in a report directory, in name order."""
    h = hashlib.sha256()
    for p in sorted(Path(out_dir).iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(file_sha256(p).encode())
    return h.hexdigest()
