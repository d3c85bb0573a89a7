"""Learned teacher-feature transforms: a single linear layer and one residual block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .activations import PooledActivations
from .errors import ConfigError, DivergenceError, ShapeMismatch, SingularSystem
from .transforms import Transformation


@dataclass
class FitConfig:
    ridge_lambda: float = 1e-6
    lr: float = 1e-2
    epochs: int = 500
    hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda must be >= 0")
        if not self.lr > 0 or self.epochs < 1:
            raise ConfigError("lr and epochs must be positive")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden width must be >= 1")


def _pair(pooled_t, pooled_s) -> tuple[np.ndarray, np.ndarray]:
    x = pooled_t.data if isinstance(pooled_t, PooledActivations) else np.asarray(pooled_t, dtype=np.float64)
    y = pooled_s.data if isinstance(pooled_s, PooledActivations) else np.asarray(pooled_s, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape:
        raise ShapeMismatch(f"teacher {x.shape} and student {y.shape} features must both be b x c")
    return x, y


def fit_linear_transform(pooled_t, pooled_s, cfg: FitConfig | None = None) -> Transformation:
    """Ridge solution W = (X^T X + lam I)^-1 X^T Y via Cholesky."""
    cfg = cfg or FitConfig()
    x, y = _pair(pooled_t, pooled_s)
    c = x.shape[1]
    lam = cfg.ridge_lambda
    if lam == 0 and np.linalg.matrix_rank(x) < c:
        raise SingularSystem("teacher Gram matrix is singular; use ridge_lambda > 0")
    gram = x.T @ x + lam * np.eye(c)
    try:
        factor = scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("teacher Gram matrix is not positive definite; use ridge_lambda > 0") from exc
    w = scipy.linalg.cho_solve(factor, x.T @ y)
    residual = float(np.sum((x @ w - y) ** 2))
    prov = {
        "strategy": "learned-fc",
        "ridge_lambda": lam,
        "residual_sq": residual,
        "objective": residual + lam * float(np.sum(w**2)),
    }
    return Transformation("linear", c, weights={"w": w}, provenance=prov)


def residual_forward(params: dict, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = x @ params["w1"] + params["b1"]
    return x + np.maximum(z, 0.0) @ params["w2"] + params["b2"], z


def residual_loss_and_grads(params: dict, x: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    """Mean squared error of the residual block and its parameter gradients."""
    out, z = residual_forward(params, x)
    r = out - y
    loss = float(np.mean(r**2))
    d_out = 2.0 * r / r.size
    h = np.maximum(z, 0.0)
    d_z = (d_out @ params["w2"].T) * (z > 0)
    grads = {
        "w2": h.T @ d_out,
        "b2": d_out.sum(axis=0),
        "w1": x.T @ d_z,
        "b1": d_z.sum(axis=0),
    }
    return loss, grads


def init_residual_params(c: int, hidden: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return {
        "w1": rng.normal(0.0, 0.01, size=(c, hidden)),
        "b1": np.zeros(hidden),
        "w2": np.zeros((hidden, c)),
        "b2": np.zeros(c),
    }


def fit_residual_transform(pooled_t, pooled_s, cfg: FitConfig | None = None) -> Transformation:
    """Full-batch gradient descent on y = x + W2 relu(W1 x + b1) + b2.

    A step that raises the loss is rejected and the learning rate halved, so
    the recorded loss curve never increases.
    """
    cfg = cfg or FitConfig()
    x, y = _pair(pooled_t, pooled_s)
    if x.shape[0] < 2:
        raise ConfigError("residual fit needs at least 2 samples")
    c = x.shape[1]
    params = init_residual_params(c, cfg.hidden or c, cfg.seed)
    lr = cfg.lr
    # overflow is detected explicitly below, so numpy's warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads = residual_loss_and_grads(params, x, y)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite loss at initialization; rescale the features")
        curve = [loss]
        for _ in range(cfg.epochs):
            trial = {k: params[k] - lr * grads[k] for k in params}
            new_loss, new_grads = residual_loss_and_grads(trial, x, y)
            if not np.isfinite(new_loss):
                raise DivergenceError(f"non-finite loss at lr={lr}; lower the learning rate")
            if new_loss <= loss:
                params, loss, grads = trial, new_loss, new_grads
            else:
                lr *= 0.5
            curve.append(loss)
    prov = {
        "strategy": "learned-res",
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "initial_mse": curve[0],
        "final_mse": loss,
        "final_lr": lr,
        "loss_curve": curve,
    }
    return Transformation("residual", c, weights=params, provenance=prov)
