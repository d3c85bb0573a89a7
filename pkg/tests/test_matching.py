import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from kcdistill.activations import ActivationTensor, PooledActivations
from kcdistill.consistency import consistency_matrix, consistency_score
from kcdistill.errors import ConfigError, InvalidValue, PartitionError, ShapeMismatch
from kcdistill.matching import (
    PerClassTransformSet,
    derive_transform,
    hungarian,
    load_any_transform,
    match_bipartite,
    match_greedy,
    match_random,
    per_class_transforms,
)
from kcdistill.transforms import Transformation, apply_transform, identity_transform


def brute_force(m):
    """Best score over all permutations and the lexicographically smallest map achieving it."""
    c = m.shape[0]
    best, best_map = -math.inf, None
    for perm in itertools.permutations(range(c)):
        score = sum(m[perm[j], j] for j in range(c))
        if score > best:
            best, best_map = score, perm
    return best, list(best_map)


def test_greedy_hand_example():
    t = match_greedy(np.array([[0.9, 0.8], [0.1, 0.7]]))
    assert t.kind == "index_map"
    assert t.map.tolist() == [0, 0]
    assert consistency_score(np.array([[0.9, 0.8], [0.1, 0.7]]), t) == pytest.approx(1.7)


def test_greedy_identity_matrix():
    assert match_greedy(np.eye(5)).map.tolist() == list(range(5))


def test_greedy_dominates_all_permutations_8x8():
    m = np.random.default_rng(8).normal(size=(8, 8))
    g = consistency_score(m, match_greedy(m))
    for perm in itertools.permutations(range(8)):
        assert g >= m[list(perm), range(8)].sum()


def test_bipartite_small_cases():
    assert match_bipartite(np.array([[0.0, 1.0], [1.0, 0.0]])).map.tolist() == [1, 0]
    t = match_bipartite(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert t.map.tolist() == [0, 1]
    assert consistency_score(np.array([[2.0, 1.0], [1.0, 2.0]]), t) == 4.0
    assert match_bipartite(np.array([[0.3]])).map.tolist() == [0]


def test_bipartite_matches_exhaustive_7x7():
    for seed in range(100):
        m = np.random.default_rng(seed).normal(size=(7, 7))
        best, _ = brute_force(m)
        t = match_bipartite(m)
        assert sorted(t.map.tolist()) == list(range(7))
        assert abs(consistency_score(m, t) - best) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.booleans())
def test_bipartite_lexicographic_tie_break(c, seed, integer):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 3, size=(c, c)).astype(float) if integer else rng.normal(size=(c, c))
    best, best_map = brute_force(m)
    t = match_bipartite(m)
    assert consistency_score(m, t) == pytest.approx(best, abs=1e-9)
    assert t.map.tolist() == best_map


def test_hungarian_against_scipy():
    for n in (1, 5, 50, 120):
        cost = np.random.default_rng(n).uniform(0, 10, size=(n, n))
        assign, u, v = hungarian(cost)
        r, c = linear_sum_assignment(cost)
        assert cost[np.arange(n), assign].sum() == pytest.approx(cost[r, c].sum(), abs=1e-9)
        reduced = cost - u[:, None] - v[None, :]
        assert reduced.min() >= -1e-9
        np.testing.assert_allclose(reduced[np.arange(n), assign], 0.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1), st.floats(-100, 100), st.floats(0.01, 100))
def test_bipartite_shift_and_scale_invariance(c, seed, shift, scale):
    m = np.random.default_rng(seed).normal(size=(c, c))
    base = match_bipartite(m).map.tolist()
    assert match_bipartite(m + shift).map.tolist() == base
    assert match_bipartite(m * scale).map.tolist() == base


def test_bipartite_on_self_correlation_is_identity():
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=(100, 9))
        assert match_bipartite(consistency_matrix(x, x)).map.tolist() == list(range(9))


def test_dominance_chain():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(6, 6))
        g = consistency_score(m, match_greedy(m))
        b = consistency_score(m, match_bipartite(m))
        assert g >= b >= consistency_score(m)
        for k in range(50):
            assert b >= consistency_score(m, match_random(6, 1000 * seed + k))


def test_random_determinism_and_uniformity():
    assert match_random(9, 4).map.tolist() == match_random(9, 4).map.tolist()
    counts = Counter(tuple(match_random(3, s).map.tolist()) for s in range(10_000))
    assert len(counts) == 6
    p = 1 / 6
    sigma = math.sqrt(10_000 * p * (1 - p))
    for n in counts.values():
        assert abs(n - 10_000 * p) <= 3 * sigma
    assert match_random(1, 0).map.tolist() == [0]
    with pytest.raises(ConfigError):
        match_random(0, 0)


def test_matrix_validation():
    with pytest.raises(ShapeMismatch):
        match_bipartite(np.ones((2, 3)))
    with pytest.raises(InvalidValue):
        match_greedy(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(InvalidValue):
        match_bipartite(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    with pytest.raises(ConfigError):
        derive_transform(np.eye(2), "psychic")


def test_derive_transform_dispatch():
    m = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert derive_transform(m, "identity").kind == "identity"
    assert derive_transform(m, "bipartite").map.tolist() == [1, 0]
    assert derive_transform(m, "greedy").map.tolist() == [1, 0]
    assert derive_transform(m, "random", 3).map.tolist() == match_random(2, 3).map.tolist()


# -- transformations -----------------------------------------------------------


def test_identity_apply_and_serialization(tmp_path):
    x = np.random.default_rng(0).normal(size=(4, 3, 2, 2))
    t = identity_transform(3)
    assert apply_transform(t, ActivationTensor(x)).data.tobytes() == x.tobytes()
    assert consistency_score(np.diag([1.0, 2.0, 3.0]), t) == 6.0
    t.save(tmp_path / "id.json")
    back = Transformation.load(tmp_path / "id.json")
    assert back.kind == "identity" and back.channels == 3


def test_permutation_and_index_map_semantics():
    a, b = 1.5, -2.0
    x = PooledActivations(np.array([[a, b]]))
    assert apply_transform(Transformation("permutation", 2, [1, 0]), x).data.tolist() == [[b, a]]
    assert apply_transform(Transformation("index_map", 2, [0, 0]), x).data.tolist() == [[a, a]]


def test_spatial_tensors_permute_channels():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 5)).astype(np.float32)
    y = apply_transform(Transformation("permutation", 3, [2, 0, 1]), ActivationTensor(x))
    assert y.dtype == np.float32
    assert np.array_equal(y.data, x[:, [2, 0, 1]])


def test_linear_identity_weights():
    x = np.random.default_rng(2).normal(size=(6, 4, 2, 3))
    t = Transformation("linear", 4, weights={"w": np.eye(4)})
    np.testing.assert_allclose(apply_transform(t, ActivationTensor(x)).data, x, atol=1e-12, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_permutation_inverse_restores_input(c, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, c))
    t = Transformation("permutation", c, rng.permutation(c))
    assert t.inverse().apply_matrix(t.apply_matrix(x)).tobytes() == x.tobytes()


def test_transform_validation():
    with pytest.raises(InvalidValue):
        Transformation("permutation", 3, [0, 0, 1])
    with pytest.raises(InvalidValue):
        Transformation("index_map", 2, [0, 2])
    with pytest.raises(ShapeMismatch):
        Transformation("index_map", 2, [0])
    with pytest.raises(ShapeMismatch):
        Transformation("linear", 2, weights={"w": np.eye(3)})
    with pytest.raises(ConfigError):
        Transformation("linear", 2)
    with pytest.raises(ConfigError):
        Transformation("rotation", 2)


@pytest.mark.parametrize(
    "t",
    [
        Transformation("permutation", 3, [2, 0, 1], provenance={"strategy": "bipartite"}),
        Transformation("index_map", 3, [0, 0, 2]),
        Transformation("linear", 2, weights={"w": np.array([[0.5, 1.0], [2.0, -1.0]])}),
        Transformation(
            "residual",
            2,
            weights={"w1": np.ones((2, 3)), "b1": np.zeros(3), "w2": np.ones((3, 2)) * 0.1, "b2": np.ones(2)},
        ),
    ],
    ids=lambda t: t.kind,
)
def test_transform_save_load(tmp_path, t):
    t.save(tmp_path / "t.json")
    back = Transformation.load(tmp_path / "t.json")
    x = np.random.default_rng(0).normal(size=(4, t.channels))
    assert back.kind == t.kind and back.provenance == t.provenance
    assert back.apply_matrix(x).tobytes() == t.apply_matrix(x).tobytes()


# -- per-class transforms --------------------------------------------------------


def _class_data(seed=0, b=80, c=5, classes=4):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, c)), rng.normal(size=(b, c)), np.arange(b) % classes


def test_per_class_k1_equals_global():
    t, s, y = _class_data()
    tset = per_class_transforms(t, s, y, 1)
    assert tset.k_partitions == 1 and len(tset.transforms) == 1
    assert tset.transforms[0].map.tolist() == match_bipartite(consistency_matrix(t, s)).map.tolist()


def test_per_class_one_per_class():
    t, s, y = _class_data()
    tset = per_class_transforms(t, s, y, 4, strategy="greedy")
    assert len(tset.transforms) == 4
    assert sorted(tset.class_to_partition.values()) == [0, 1, 2, 3]
    for cls in range(4):
        rows = y == cls
        ref = match_greedy(consistency_matrix(t[rows], s[rows]))
        assert tset.lookup(cls).map.tolist() == ref.map.tolist()


def test_per_class_indivisible():
    t, s, y = _class_data()
    with pytest.raises(PartitionError):
        per_class_transforms(t, s, y, 3)
    with pytest.raises(ConfigError):
        per_class_transforms(t, s, y, 2, strategy="random")


def test_per_class_routing_and_save(tmp_path):
    t, s, y = _class_data(3)
    tset = per_class_transforms(t, s, y, 2)
    out = tset.apply_matrix(t, y)
    for i in range(len(y)):
        assert np.array_equal(out[i], tset.lookup(y[i]).apply_matrix(t[i : i + 1])[0])
    tset.save(tmp_path / "pc.json")
    back = load_any_transform(tmp_path / "pc.json")
    assert isinstance(back, PerClassTransformSet)
    assert back.apply_matrix(t, y).tobytes() == out.tobytes()
    with pytest.raises(ConfigError):
        tset.lookup(99)
