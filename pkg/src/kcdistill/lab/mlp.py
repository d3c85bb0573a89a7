"""ReLU multilayer perceptrons with hand-written forward and backward passes."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeMismatch

# hidden widths as multiples of the paired-layer width ``c``
ARCHITECTURES = {
    "student-small": (1,),
    "student-wide": (2, 1),
    "teacher-deep": (4, 4, 1),
    "teacher-shallow": (4, 1),
}
_CUSTOM = re.compile(r"^mlp:(\d+(?:-\d+)*)$")


def hidden_widths(arch_tag: str, width: int) -> tuple[int, ...]:
    """Resolve an architecture tag; ``mlp:64-32`` gives explicit widths."""
    if arch_tag in ARCHITECTURES:
        return tuple(m * width for m in ARCHITECTURES[arch_tag])
    match = _CUSTOM.match(arch_tag)
    if match:
        return tuple(int(w) for w in match.group(1).split("-"))
    raise ConfigError(f"unknown architecture {arch_tag!r}; known: {sorted(ARCHITECTURES)} or mlp:W1-W2-...")


@dataclass
class ModelWeights:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    init_seed: int = 0
    arch_tag: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("weights and biases must pair up")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != b.shape[0]:
                raise ShapeMismatch(f"layer {k}: weight {w.shape} vs bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {k} does not chain from layer {k - 1}")

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.init_seed,
            self.arch_tag,
            dict(self.meta),
        )

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        arrays = {f"w{k}": w for k, w in enumerate(self.weights)}
        arrays.update({f"b{k}": b for k, b in enumerate(self.biases)})
        arrays["init_seed"] = np.array(self.init_seed)
        arrays["arch_tag"] = np.array(self.arch_tag)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ModelWeights":
        with np.load(path, allow_pickle=False) as z:
            n = sum(1 for k in z.files if k.startswith("w"))
            return cls(
                [z[f"w{k}"] for k in range(n)],
                [z[f"b{k}"] for k in range(n)],
                int(z["init_seed"]),
                str(z["arch_tag"]),
            )


def init_model(arch_tag: str, seed: int, d: int, classes: int, width: int = 32) -> ModelWeights:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
    widths = hidden_widths(arch_tag, width)
    rng = np.random.default_rng(seed)
    dims = (d, *widths, classes)
    weights = [rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in) for fan_in, fan_out in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(fan_out) for fan_out in dims[1:]]
    return ModelWeights(weights, biases, int(seed), arch_tag, {"width": width, "d": d, "classes": classes})


def forward_with_activations(model: ModelWeights, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return logits and the post-ReLU output of every hidden layer (each b x c)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[0]:
        raise ShapeMismatch(f"batch must be b x {model.weights[0].shape[0]}, got {x.shape}")
    acts = []
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    return logits, acts


def backward(
    model: ModelWeights,
    x: np.ndarray,
    acts: list[np.ndarray],
    d_logits: np.ndarray,
    d_acts: dict[int, np.ndarray] | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Backpropagate ``d_logits`` plus any extra gradients on hidden activations.

    ``d_acts`` maps a hidden-layer index to dLoss/d(activation) for that layer.
    """
    d_acts = d_acts or {}
    n = len(model.weights)
    grad_w = [None] * n
    grad_b = [None] * n
    inputs = [x] + acts
    delta = d_logits
    for k in range(n - 1, -1, -1):
        grad_w[k] = inputs[k].T @ delta
        grad_b[k] = delta.sum(axis=0)
        if k == 0:
            break
        d_h = delta @ model.weights[k].T
        if (k - 1) in d_acts:
            d_h = d_h + d_acts[k - 1]
        delta = d_h * (acts[k - 1] > 0)
    return grad_w, grad_b
