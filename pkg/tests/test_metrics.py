import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from collapse_lab import data, metrics
from collapse_lab.errors import ContractError, DegenerateFeatureError
from collapse_lab.metrics import FeatureSet, WeightView
from collapse_lab.oracles import brute_inter, brute_intra


def test_identical_vectors_intra_one():
    h = np.tile([1.0, 2.0, -0.5], (5, 1))
    fs = FeatureSet(np.stack([h, -h]))
    assert metrics.intra_class(fs, 0) == pytest.approx(1.0, abs=1e-15)


def test_two_orthogonal_vectors():
    fs = FeatureSet(np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [2.0, 2.0]]]))
    assert metrics.intra_class(fs, 0) == pytest.approx(0.5, abs=1e-15)


def test_intra_matches_double_loop():
    rng = np.random.default_rng(0)
    fs = FeatureSet(rng.standard_normal((2, 9, 5)))
    assert metrics.intra_class(fs, 1) == pytest.approx(brute_intra(fs.h[1]), abs=1e-10)
    assert metrics.inter_class(fs, 0, 1) == pytest.approx(brute_inter(fs.h[0], fs.h[1]), abs=1e-10)


def test_etf_inter():
    fx = data.gen_simplex_etf(4, 5, 3, seed=2)
    assert metrics.inter_class(fx.features, 1, 3) == pytest.approx(-1 / 3, abs=1e-12)


def test_mirror_class():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((6, 4))
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    fs = FeatureSet(np.stack([h, -h]))
    assert metrics.inter_class(fs, 0, 1) == pytest.approx(-metrics.intra_class(fs, 0), abs=1e-14)


def test_same_class_inter_is_contract_error():
    with pytest.raises(ContractError):
        metrics.inter_class(FeatureSet(np.ones((2, 2, 2))), 1, 1)


def test_zero_vector_names_location():
    h = np.ones((3, 4, 2))
    h[2, 1] = 0.0
    with pytest.raises(DegenerateFeatureError) as info:
        metrics.intra_class(FeatureSet(h), 2)
    assert (info.value.cls, info.value.index) == (2, 1)


def test_nc3_etf_alignment_and_scale():
    fx = data.gen_simplex_etf(4, 4, 3, seed=0)
    W = fx.vertices
    for c in range(4):
        assert metrics.nc3_cos(W, fx.features, c) == pytest.approx(1.0, abs=1e-12)
    scaled = FeatureSet(fx.features.h * 7)
    assert metrics.nc3_cos(W, scaled, 2) == pytest.approx(metrics.nc3_cos(W, fx.features, 2), abs=1e-14)


def test_nc3_matches_naive():
    rng = np.random.default_rng(5)
    W = rng.standard_normal((3, 4))
    fs = FeatureSet(rng.standard_normal((3, 6, 4)))
    wc = W[1] - W.mean(axis=0)
    hc = fs.h[1].mean(axis=0)
    naive = wc @ hc / (np.linalg.norm(wc) * np.linalg.norm(hc))
    assert metrics.nc3_cos(W, fs, 1) == pytest.approx(naive, abs=1e-12)


@pytest.mark.parametrize("C", [3, 4, 10])
def test_summary_on_etf(C):
    fx = data.gen_simplex_etf(C, C, 4, seed=C)
    rep = metrics.summarize(fx.features, fx.vertices, centering=False)
    assert abs(rep.min_intra - 1) <= 1e-12
    assert abs(rep.max_inter + 1 / (C - 1)) <= 1e-12


def test_summary_outlier_class():
    rng = np.random.default_rng(2)
    fx = data.gen_simplex_etf(4, 4, 10, seed=0)
    h = fx.features.h.copy()
    h[2] += rng.normal(0, 0.8, h[2].shape)
    rep = metrics.summarize(FeatureSet(h), fx.vertices)
    assert int(np.argmin(rep.intra)) == 2


def test_summary_permutation_invariant():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((4, 7, 5))
    W = rng.standard_normal((4, 5))
    perm = np.array([2, 0, 3, 1])
    a = metrics.summarize(FeatureSet(h), W)
    b = metrics.summarize(FeatureSet(h[perm]), W[perm])
    for key in ("min_intra", "max_inter", "avg_intra", "avg_inter", "avg_nc3", "alpha", "beta"):
        assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-13)


def test_summary_shape_contract():
    with pytest.raises(ContractError):
        metrics.summarize(FeatureSet(np.ones((3, 2, 4))), np.ones((3, 5)))


def test_norm_stats_unit_and_scaled_identity():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((3, 5, 4))
    h /= np.linalg.norm(h, axis=2, keepdims=True)
    alpha, beta, alpha_c, _ = metrics.norm_stats(FeatureSet(h), np.eye(3, 4))
    assert alpha == pytest.approx(1.0, abs=1e-14)
    npt.assert_allclose(alpha_c, 1.0, atol=1e-14)
    # beta = |W|_F / sqrt(C): the padded identity has |W|_F = sqrt(C)
    assert beta == pytest.approx(1.0, abs=1e-14)
    _, beta_scaled, _, _ = metrics.norm_stats(FeatureSet(h), math.sqrt(3) * np.eye(3, 4))
    assert beta_scaled == pytest.approx(math.sqrt(3), abs=1e-14)


def test_report_to_dict_schema():
    fx = data.gen_simplex_etf(3, 3, 2, seed=0)
    d = metrics.summarize(fx.features, fx.vertices).to_dict()
    assert len(d["inter"]) == 3 and len(d["intra"]) == 3
    assert all(isinstance(v, float) for v in d["nc3"])


@settings(max_examples=40, deadline=None)
@given(
    h=arrays(np.float64, st.tuples(st.integers(2, 4), st.integers(1, 6), st.integers(1, 5)),
             elements=st.floats(-10, 10, allow_nan=False)),
)
def test_cosines_bounded_property(h):
    norms = np.linalg.norm(h, axis=2)
    if np.any(norms < 1e-3):
        return
    fs = FeatureSet(h)
    for c in range(fs.n_classes):
        v = metrics.intra_class(fs, c)
        assert -1e-12 <= v <= 1 + 1e-12
        assert v == pytest.approx(brute_intra(fs.h[c]), abs=1e-10)
    v = metrics.inter_class(fs, 0, 1)
    assert -1 - 1e-12 <= v <= 1 + 1e-12


def test_weight_view():
    W = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    wv = WeightView(W)
    npt.assert_allclose(wv.mean_row, 0.0)
    assert wv.beta == pytest.approx(math.sqrt(4 / 3))
