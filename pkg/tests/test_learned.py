import numpy as np
import pytest

from kcdistill.errors import ConfigError, DivergenceError, ShapeMismatch, SingularSystem
from kcdistill.learned import FitConfig, fit_linear_transform, fit_residual_transform
from kcdistill.matching import match_random

EXACT = FitConfig(ridge_lambda=0.0)


def _features(seed, b=60, c=6):
    return np.random.default_rng(seed).normal(size=(b, c))


def test_identity_fit():
    x = _features(0)
    w = fit_linear_transform(x, x, EXACT).weights["w"]
    np.testing.assert_allclose(w, np.eye(6), atol=1e-8, rtol=0)


def test_planted_permutation_recovered():
    for seed in range(10):
        x = _features(seed)
        perm = np.random.default_rng(100 + seed).permutation(6)
        p = np.eye(6)[perm].T  # x @ p == x[:, perm]
        w = fit_linear_transform(x, x[:, perm], EXACT).weights["w"]
        np.testing.assert_allclose(w, p, atol=1e-8, rtol=0)


def test_underdetermined_is_singular():
    with pytest.raises(SingularSystem):
        fit_linear_transform(np.array([[1.0, 2.0]]), np.array([[0.0, 1.0]]), EXACT)
    # a small ridge makes the same system solvable
    fit_linear_transform(np.array([[1.0, 2.0]]), np.array([[0.0, 1.0]]), FitConfig(ridge_lambda=1e-3))


def test_linear_beats_every_permutation():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(80, 5))
    y = x @ rng.normal(size=(5, 5)) + 0.1 * rng.normal(size=(80, 5))
    fit = fit_linear_transform(x, y, EXACT)
    for k in range(200):
        perm = match_random(5, k)
        assert fit.provenance["residual_sq"] <= np.sum((perm.apply_matrix(x) - y) ** 2)


def test_ridge_norm_nonincreasing():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(40, 5))
    y = rng.normal(size=(40, 5))
    lams = [0.0, 1e-4, 1e-2, 0.1, 1.0, 10.0, 100.0]
    ws = [fit_linear_transform(x, y, FitConfig(ridge_lambda=lam)).weights["w"] for lam in lams]
    norms = [np.linalg.norm(w) for w in ws]
    assert all(a >= b for a, b in zip(norms, norms[1:]))
    # continuity: a tiny change in lambda gives a tiny change in W
    w1 = fit_linear_transform(x, y, FitConfig(ridge_lambda=1.0)).weights["w"]
    w2 = fit_linear_transform(x, y, FitConfig(ridge_lambda=1.0 + 1e-9)).weights["w"]
    assert np.abs(w1 - w2).max() < 1e-8


def test_residual_already_optimal():
    x = _features(1)
    t = fit_residual_transform(x, x, FitConfig(epochs=50, seed=3))
    assert t.provenance["initial_mse"] == 0.0
    assert t.provenance["final_mse"] <= t.provenance["initial_mse"]
    assert np.abs(t.weights["w2"]).max() < 1e-12
    np.testing.assert_allclose(t.apply_matrix(x), x, atol=1e-12)


def test_residual_on_linear_target():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 4))
    y = x @ (np.eye(4) + 0.3 * rng.normal(size=(4, 4)))
    t = fit_residual_transform(x, y, FitConfig(epochs=400, lr=0.1, seed=0))
    curve = t.provenance["loss_curve"]
    assert all(a >= b for a, b in zip(curve, curve[1:]))
    # the zero-hidden baseline is the identity map (residual block with w2 = 0)
    assert t.provenance["final_mse"] <= np.mean((x - y) ** 2)
    assert t.provenance["final_mse"] < 0.5 * t.provenance["initial_mse"]
    linear_mse = fit_linear_transform(x, y, EXACT).provenance["residual_sq"] / y.size
    assert linear_mse <= t.provenance["final_mse"]


def test_residual_determinism():
    x, y = _features(5), _features(6)
    a = fit_residual_transform(x, y, FitConfig(epochs=30, seed=9))
    b = fit_residual_transform(x, y, FitConfig(epochs=30, seed=9))
    for k in a.weights:
        assert a.weights[k].tobytes() == b.weights[k].tobytes()
    c = fit_residual_transform(x, y, FitConfig(epochs=30, seed=10))
    assert a.weights["w1"].tobytes() != c.weights["w1"].tobytes()


def test_residual_divergence_reported():
    x = _features(0)
    with pytest.raises(DivergenceError):
        fit_residual_transform(x * 1e160, -x * 1e160, FitConfig(epochs=5))
    with pytest.raises(DivergenceError):
        fit_residual_transform(x * 1e100, -x * 1e100, FitConfig(epochs=5, lr=1e100))


def test_config_and_shape_errors():
    with pytest.raises(ConfigError):
        FitConfig(ridge_lambda=-1)
    with pytest.raises(ConfigError):
        FitConfig(epochs=0)
    with pytest.raises(ShapeMismatch):
        fit_linear_transform(np.ones((4, 2)), np.ones((4, 3)))
