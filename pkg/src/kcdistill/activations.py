"""Activation tensors, NPY v1.0 I/O, global average pooling and manifests."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib import format as npformat

from .errors import (
    ConfigError,
    FormatError,
    InvalidValue,
    IoError,
    ShapeMismatch,
    UnsupportedLayout,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "ActivationTensor",
    "PooledActivations",
    "ManifestEntry",
    "ActivationManifest",
    "read_npy",
    "write_npy",
    "global_average_pool",
    "read_labels",
    "write_labels",
    "load_manifest",
    "load_activation_set",
]

_ACCEPTED_DESCR = {"<f4": np.float32, "<f8": np.float64}


@dataclass
class ActivationTensor:
    """A b x c x h x w activation map stored row-major."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            raise InvalidValue(f"activation dtype must be f32 or f64, got {data.dtype}")
        if not 2 <= data.ndim <= 4:
            raise ShapeMismatch(f"activation tensor must have 2 to 4 dims, got {data.ndim}")
        data = data.reshape(data.shape + (1,) * (4 - data.ndim))
        if min(data.shape) < 1:
            raise ShapeMismatch(f"every dimension must be >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidValue("activation tensor contains NaN or Inf")
        self.data = np.ascontiguousarray(data)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass
class PooledActivations:
    """b x c matrix of per-channel spatial means (always float64)."""

    data: np.ndarray
    source_shape: tuple[int, int] = (1, 1)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeMismatch(f"pooled activations must be b x c, got shape {data.shape}")
        self.data = data
        self.source_shape = tuple(self.source_shape)

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def take(self, rows) -> "PooledActivations":
        return PooledActivations(self.data[rows], self.source_shape)


def read_npy(path) -> ActivationTensor:
    """Read a little-endian, C-order f4/f8 NPY v1.0 file into an ActivationTensor."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with fh:
        try:
            version = npformat.read_magic(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: bad magic string") from exc
        if version != (1, 0):
            raise FormatError(f"{path}: only NPY version 1.0 is supported, got {version}")
        try:
            shape, fortran_order, dtype = npformat.read_array_header_1_0(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header: {exc}") from exc
        if fortran_order:
            raise UnsupportedLayout(f"{path}: fortran_order=True is not supported")
        descr = npformat.dtype_to_descr(dtype)
        if descr not in _ACCEPTED_DESCR:
            raise FormatError(f"{path}: dtype {descr!r} not accepted (need '<f4' or '<f8')")
        if not 2 <= len(shape) <= 4:
            raise FormatError(f"{path}: ndim must be 2..4, got {len(shape)}")
        count = int(np.prod(shape))
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise FormatError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype=_ACCEPTED_DESCR[descr]).reshape(shape).copy()
    return ActivationTensor(data)


def write_npy(tensor: ActivationTensor, path) -> None:
    """Write as NPY v1.0, little-endian, C-order, always with 4 dimensions."""
    data = tensor.data
    data = data.astype(data.dtype.newbyteorder("<"), copy=False)
    try:
        with open(path, "wb") as fh:
            npformat.write_array(fh, np.ascontiguousarray(data), version=(1, 0), allow_pickle=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def global_average_pool(tensor: ActivationTensor) -> PooledActivations:
    b, c, h, w = tensor.shape
    if h == 1 and w == 1:
        pooled = tensor.data.reshape(b, c).astype(np.float64)
    else:
        pooled = tensor.data.astype(np.float64).reshape(b, c, h * w).mean(axis=2)
    return PooledActivations(pooled, (h, w))


def read_labels(path) -> np.ndarray:
    try:
        labels = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise IoError(f"cannot read labels {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if labels.ndim != 1 or labels.dtype.kind not in "iu":
        raise FormatError(f"{path}: labels must be a 1-D integer array")
    return labels.astype(np.int64)


def write_labels(labels, path) -> None:
    labels = np.asarray(labels, dtype="<i8")
    try:
        with open(path, "wb") as fh:
            npformat.write_array(fh, labels, version=(1, 0), allow_pickle=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


@dataclass
class ManifestEntry:
    tensor_path: Path
    labels_path: Path
    split_tag: str = "train"
    layer_tag: str = ""


@dataclass
class ActivationManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    dataset_seed: int = 0

    def select(self, split: str | None = None, layer: str | None = None) -> list[ManifestEntry]:
        return [
            e
            for e in self.entries
            if (split is None or e.split_tag == split) and (layer is None or e.layer_tag == layer)
        ]


def load_manifest(path) -> ActivationManifest:
    """Parse a TOML or JSON manifest; relative paths resolve against its directory.

    Expected layout::

        dataset_seed = 0
        [[entries]]
        tensor = "teacher_part0.npy"
        labels = "labels_part0.npy"
        split = "train"
        layer = "teacher.h3"
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            doc = json.loads(raw)
        else:
            doc = tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: unparseable manifest: {exc}") from exc

    base = path.parent
    entries = []
    for i, rec in enumerate(doc.get("entries", [])):
        try:
            tensor = base / rec["tensor"]
            labels = base / rec["labels"]
        except KeyError as exc:
            raise ConfigError(f"{path}: entry {i} lacks {exc}") from exc
        for p in (tensor, labels):
            if not p.exists():
                raise ConfigError(f"{path}: entry {i} references missing file {p}")
        entries.append(ManifestEntry(tensor, labels, rec.get("split", "train"), rec.get("layer", "")))
    if not entries:
        raise ConfigError(f"{path}: manifest has no entries")
    return ActivationManifest(entries, int(doc.get("dataset_seed", 0)))


def load_activation_set(
    manifest: ActivationManifest, split: str | None = "train", layer: str | None = None
) -> tuple[PooledActivations, np.ndarray]:
    """Pool every selected shard and concatenate in manifest order.

    Shards are pooled one at a time so only one raw tensor is resident.
    """
    selected = manifest.select(split, layer)
    if not selected:
        raise ConfigError(f"no manifest entries match split={split!r} layer={layer!r}")
    pooled_parts, label_parts = [], []
    channels = source_shape = None
    for entry in selected:
        tensor = read_npy(entry.tensor_path)
        labels = read_labels(entry.labels_path)
        if labels.shape[0] != tensor.shape[0]:
            raise ShapeMismatch(
                f"{os.fspath(entry.labels_path)}: {labels.shape[0]} labels for {tensor.shape[0]} samples"
            )
        if channels is None:
            channels, source_shape = tensor.channels, tensor.shape[2:]
        elif tensor.channels != channels:
            raise ShapeMismatch(
                f"{os.fspath(entry.tensor_path)}: {tensor.channels} channels, expected {channels}"
            )
        pooled_parts.append(global_average_pool(tensor).data)
        label_parts.append(labels)
    return (
        PooledActivations(np.concatenate(pooled_parts, axis=0), source_shape),
        np.concatenate(label_parts),
    )
