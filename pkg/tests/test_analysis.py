import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kcdistill.activations import PooledActivations
from kcdistill.analysis import (
    ClassActivationProfile,
    channel_overlap,
    class_average_activations,
    feature_distance_report,
    top_k_channels,
)
from kcdistill.errors import ConfigError, EmptyClass, ShapeMismatch


def _profile(rows):
    return ClassActivationProfile({i: np.asarray(r, dtype=float) for i, r in enumerate(rows)}, {i: 1 for i in range(len(rows))})


def test_one_sample_per_class():
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    prof = class_average_activations(PooledActivations(x), [2, 0, 1])
    assert prof.classes == [0, 1, 2]
    assert prof.as_matrix().tolist() == [[3.0, 4.0], [5.0, 6.0], [1.0, 2.0]]


def test_duplicated_sample_keeps_mean():
    x = np.array([[1.0, 5.0], [3.0, 1.0]])
    a = class_average_activations(x, [0, 0]).per_class[0]
    b = class_average_activations(np.vstack([x, x]), [0, 0, 0, 0]).per_class[0]
    assert np.array_equal(a, b)


def test_hand_mean():
    assert class_average_activations(np.array([[0.0, 2.0], [2.0, 0.0]]), [7, 7]).per_class[7].tolist() == [1.0, 1.0]


def test_empty_class_and_shape_errors():
    with pytest.raises(EmptyClass):
        class_average_activations(np.ones((2, 2)), [0, 0], classes=[0, 1])
    with pytest.raises(ShapeMismatch):
        class_average_activations(np.ones((2, 2)), [0])


def test_identical_profiles_full_overlap():
    p = _profile(np.random.default_rng(0).normal(size=(3, 6)))
    rep = channel_overlap(p, p, [1, 2, 3, 6])
    assert all(v == 1.0 for v in rep.mean.values())


def test_disjoint_top_sets():
    t = _profile([[4.0, 3.0, 1.0, 0.0]])
    s = _profile([[0.0, 1.0, 3.0, 4.0]])
    assert channel_overlap(t, s, 2).mean[2] == 0.0


def test_k_equals_c_is_full():
    rng = np.random.default_rng(1)
    t, s = _profile(rng.normal(size=(4, 5))), _profile(rng.normal(size=(4, 5)))
    assert channel_overlap(t, s, 5).mean[5] == 1.0
    with pytest.raises(ConfigError):
        channel_overlap(t, s, 6)
    with pytest.raises(ConfigError):
        channel_overlap(t, s, 0)


def test_ties_break_towards_low_index():
    assert top_k_channels(np.array([1.0, 2.0, 2.0, 0.0]), 2).tolist() == [1, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_overlap_symmetric_and_permutation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    t, s = rng.normal(size=(2, 3, 6))
    perm = rng.permutation(6)
    forward = channel_overlap(_profile(t), _profile(s), k).mean[k]
    assert forward == channel_overlap(_profile(s), _profile(t), k).mean[k]
    assert forward == channel_overlap(_profile(t[:, perm]), _profile(s[:, perm]), k).mean[k]


def test_overlap_report_outputs(tmp_path):
    rng = np.random.default_rng(2)
    t, s = _profile(rng.normal(size=(2, 4))), _profile(rng.normal(size=(2, 4)))
    rep = channel_overlap(t, s, [1, 2])
    rep.write_csv(tmp_path / "o.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2
    summary = rep.summary()
    assert summary["mean_overlap"] == {"1": rep.mean[1], "2": rep.mean[2]}
    t.write_csv(tmp_path / "p.csv")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 3


def test_distance_identical_is_zero():
    x = np.random.default_rng(3).normal(size=(5, 4))
    rep = feature_distance_report(x, x.copy())
    assert rep["mean_l2"] == 0.0 and rep["mean_kl"] == 0.0 and rep["samples"] == 5


def test_distance_hand_value():
    t = np.array([[1.0, 0.0], [1.0, 0.0]])
    s = np.array([[0.0, 1.0], [0.0, 1.0]])
    rep = feature_distance_report(t, s)
    assert rep["mean_l2"] == pytest.approx(np.sqrt(2), abs=1e-15)
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    q = p[::-1]
    assert rep["mean_kl"] == pytest.approx(np.sum(p * np.log(p / q)), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_distance_nonnegative(seed):
    rng = np.random.default_rng(seed)
    t, s = rng.normal(size=(2, 6, 3))
    rep = feature_distance_report(t, s)
    assert rep["mean_l2"] > 0 and rep["mean_kl"] > 0
    # a constant shift per row leaves the softmax unchanged
    shifted = feature_distance_report(t, t + rng.normal(size=(6, 1)))
    assert shifted["mean_kl"] == pytest.approx(0.0, abs=1e-12)


def test_distance_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        feature_distance_report(np.ones((2, 3)), np.ones((2, 4)))
