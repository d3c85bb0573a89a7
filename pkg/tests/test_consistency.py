import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kcdistill.activations import PooledActivations
from kcdistill.consistency import ConsistencyMatrix, ConsistencyMetric, consistency_matrix, consistency_score
from kcdistill.errors import ConfigError, InsufficientSamples, InvalidValue, ShapeMismatch
from kcdistill.matching import match_random
from kcdistill.transforms import Transformation, identity_transform


def _col(*values):
    return np.array(values, dtype=np.float64)[:, None]


def _pearson_fraction(x, y):
    """Exact rational Pearson numerator and squared denominator."""
    x = [Fraction(v) for v in x]
    y = [Fraction(v) for v in y]
    mx, my = sum(x) / len(x), sum(y) / len(y)
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den2 = sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y)
    return num, den2


def test_self_correlation_diagonal_is_one():
    for seed in range(20):
        x = np.random.default_rng(seed).normal(size=(50, 7)) * 10.0 ** np.arange(-3, 4) + 5.0
        m = consistency_matrix(x, x, "correlation").m
        np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-12, rtol=0)


def test_perfect_anticorrelation():
    assert consistency_matrix(_col(1, 2, 3), _col(3, 2, 1)).m[0, 0] == -1.0


def test_worked_example_exact():
    num, den2 = _pearson_fraction([1, 0, 1], [0, 1, 1])
    assert num * num / den2 == Fraction(1, 4) and num < 0
    assert consistency_matrix(_col(1, 0, 1), _col(0, 1, 1)).m[0, 0] == -0.5


def test_l2_hand_value():
    m = consistency_matrix(_col(0, 0), _col(3, 4), ConsistencyMetric("l2", 1e-8)).m
    assert m[0, 0] == 1.0 / (5.0 + 1e-8)


def test_l1_and_cosine_hand_values():
    assert consistency_matrix(_col(0, 0), _col(3, 4), "l1").m[0, 0] == 1.0 / (7.0 + 1e-8)
    m = consistency_matrix(_col(1, 0), _col(1, 1), "cosine").m[0, 0]
    assert m == pytest.approx(1 / np.sqrt(2), abs=1e-8)


def test_correlation_matches_corrcoef():
    rng = np.random.default_rng(5)
    t, s = rng.normal(size=(2, 40, 6))
    ref = np.corrcoef(t.T, s.T)[:6, 6:]
    np.testing.assert_allclose(consistency_matrix(t, s).m, ref, atol=1e-12)


def test_constant_channel_gives_zero():
    t = np.column_stack([np.ones(5), np.arange(5.0)])
    m = consistency_matrix(t, t).m
    assert m[0].tolist() == [0.0, 0.0] and m[:, 0].tolist() == [0.0, 0.0]


def test_brute_force_lp():
    rng = np.random.default_rng(9)
    t, s = rng.normal(size=(2, 8, 5))
    for kind, p in (("l1", 1), ("l2", 2)):
        m = consistency_matrix(t, s, kind).m
        for i, j in itertools.product(range(5), range(5)):
            ref = 1.0 / (np.linalg.norm(t[:, i] - s[:, j], ord=p) + 1e-8)
            assert m[i, j] == pytest.approx(ref, rel=1e-13)


def test_threads_do_not_change_bytes():
    rng = np.random.default_rng(2)
    t, s = rng.normal(size=(2, 30, 33))
    for kind in ("l1", "l2"):
        a = consistency_matrix(t, s, kind, threads=1).m
        b = consistency_matrix(t, s, kind, threads=4).m
        assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100), st.floats(-50, 50))
def test_correlation_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 25, 4))
    np.testing.assert_allclose(consistency_matrix(a * x + b, y).m, consistency_matrix(x, y).m, atol=1e-9, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["l1", "l2"]))
def test_lp_swap_symmetry(seed, kind):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 10, 5))
    assert np.array_equal(consistency_matrix(x, y, kind).m, consistency_matrix(y, x, kind).m.T)


def test_kl_nonpositive_and_zero_on_match():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 5))
    y = np.column_stack([x[:, 2] + 3.0, rng.normal(size=(20, 4))])
    m = consistency_matrix(x, y, "kl").m
    assert (m <= 0).all()
    assert m[2, 0] == pytest.approx(0.0, abs=1e-14)
    off = np.delete(m[:, 0], 2)
    assert (off < 0).all()


def test_trace_and_swap():
    assert consistency_score(np.array([[1.0, 2.0], [3.0, 4.0]])) == 5.0
    swap = Transformation("permutation", 2, [1, 0])
    assert consistency_score(np.array([[0.0, 1.0], [1.0, 0.0]]), swap) == 2.0
    assert consistency_score(np.eye(3) * 2, identity_transform(3)) == 6.0


def test_score_brute_force_random_permutation():
    for seed in range(20):
        m = np.random.default_rng(seed).normal(size=(6, 6))
        t = match_random(6, seed)
        ref = sum(m[t.map[j], j] for j in range(6))
        assert consistency_score(m, t) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("kind", ["permutation", "index_map"])
def test_lookup_equals_materialized(kind):
    rng = np.random.default_rng(11)
    t, s = rng.normal(size=(2, 30, 6))
    mapping = rng.permutation(6) if kind == "permutation" else rng.integers(0, 6, size=6)
    tr = Transformation(kind, 6, mapping)
    m = consistency_matrix(t, s)
    direct = np.trace(consistency_matrix(tr.apply_matrix(t), s).m)
    assert consistency_score(m, tr) == pytest.approx(direct, abs=1e-9)


def test_linear_score_needs_features():
    rng = np.random.default_rng(1)
    t, s = rng.normal(size=(2, 20, 3))
    lin = Transformation("linear", 3, weights={"w": np.eye(3)})
    m = consistency_matrix(t, s)
    with pytest.raises(ConfigError):
        consistency_score(m, lin)
    assert consistency_score(m, lin, teacher=t, student=s) == pytest.approx(consistency_score(m), abs=1e-12)


def test_errors():
    with pytest.raises(ShapeMismatch):
        consistency_matrix(np.ones((3, 2)), np.ones((3, 3)))
    with pytest.raises(ShapeMismatch):
        consistency_matrix(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(InsufficientSamples):
        consistency_matrix(np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(InvalidValue):
        consistency_matrix(np.array([[np.nan], [1.0]]), np.ones((2, 1)))
    with pytest.raises(ConfigError):
        ConsistencyMetric("manhattan-ish")
    with pytest.raises(ConfigError):
        ConsistencyMetric("l2", 0.0)


def test_matrix_save_load(tmp_path):
    x = PooledActivations(np.random.default_rng(0).normal(size=(10, 3)))
    m = consistency_matrix(x, x, "cosine")
    m.save(tmp_path / "m.npy")
    back = ConsistencyMatrix.load(tmp_path / "m.npy")
    assert back.m.tobytes() == m.m.tobytes()
    assert back.metric == m.metric and back.sample_count == 10
