import math

import numpy as np
import numpy.testing as npt
import pytest

from collapse_lab import bounds, nn, oracles
from collapse_lab.oracles import SLACK


def _subset_deviation_margins(xs, f, m):
    n = len(xs)
    mean = xs.mean()
    eps = max(float(np.mean(f(xs)) - f(mean)), 0.0)
    masks = oracles.subset_masks(n, np.random.default_rng(0))
    sizes = masks.sum(axis=1)
    delta = sizes / n
    dev = np.abs(masks @ xs / sizes - mean)
    return dev - np.sqrt(2 * eps * (1 - delta) / (m * delta)) - SLACK, masks @ xs / sizes


def test_jensen_constant_values():
    xs = np.full(6, 1.7)
    margins, sub = _subset_deviation_margins(xs, lambda x: x * x, 2.0)
    npt.assert_allclose(sub, 1.7, atol=1e-15)
    assert np.all(margins <= 0)


def test_jensen_0_0_3():
    margins, _ = _subset_deviation_margins(np.array([0.0, 0.0, 3.0]), lambda x: x * x, 2.0)
    assert len(margins) == 6 and np.all(margins <= 0)


def test_subset_enumeration_counts():
    rng = np.random.default_rng(0)
    assert oracles.subset_masks(12, rng).shape == (2**12 - 2, 12)
    sampled = oracles.subset_masks(20, rng)
    assert sampled.shape == (oracles.SAMPLED_SUBSETS, 20)
    sizes = sampled.sum(axis=1)
    assert sizes.min() >= 1 and sizes.max() <= 19


def test_variance_gap_square_is_identity():
    xs = np.random.default_rng(1).normal(0, 2, 30)
    eps = np.mean(xs**2) - xs.mean() ** 2
    assert abs(np.var(xs) - 2 * eps / 2) < 1e-12


def test_exp_subset_two_points():
    xs = np.array([0.0, 1.0])
    mean = xs.mean()
    eps = np.mean(np.exp(xs)) - math.exp(mean)
    assert 1.0 <= mean + math.sqrt(2 * eps / (0.5 * math.exp(mean)))


def test_intra_conversion_trivial_and_boundary():
    u = np.array([0.6, 0.8])
    alpha = 2.0
    v = np.tile(u * alpha, (5, 1))
    t = np.linalg.norm((v / np.linalg.norm(v, axis=1, keepdims=True)).mean(axis=0))
    c = u @ v.mean(axis=0)
    assert t == pytest.approx(1.0) and 2 * (c / alpha) ** 2 - 1 == pytest.approx(1.0)
    # c = alpha / sqrt(2) puts the right-hand side at zero
    assert 2 * ((alpha / math.sqrt(2)) / alpha) ** 2 - 1 == pytest.approx(0.0, abs=1e-15)


def test_inter_divide_antiparallel():
    h = np.tile([1.0, 0.0, 0.0], (4, 1))
    w = np.array([-1.0, 0.0, 0.0])
    alpha, beta = 1.0, 1.0
    c = w @ h.mean(axis=0)
    t = h.mean(axis=0)
    cos = w @ t / (np.linalg.norm(w) * np.linalg.norm(t))
    assert cos == -1.0 and cos <= -c / (alpha * beta)


def test_bn_norm_examples():
    out, _ = nn.bn_forward(np.array([[1.0], [3.0]]), np.array([2.0]))
    assert math.sqrt(np.mean(out**2)) == pytest.approx(2.0)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((81, 6))
    gamma = rng.normal(0, 1, 6)
    parts = [nn.bn_forward(X[a:b], gamma)[0] for a, b in ((0, 32), (32, 64), (64, 81))]
    H = np.concatenate(parts)
    assert abs(math.sqrt(np.mean(np.sum(H * H, axis=1))) - np.linalg.norm(gamma)) < 1e-12
    zero, _ = nn.bn_forward(X, np.zeros(6))
    assert not zero.any()


@pytest.mark.parametrize("seed", range(10))
def test_checks_pass_across_seeds(seed):
    results = [
        oracles.check_bn_norm(40, seed),
        oracles.check_metric_identity(10, seed),
        oracles.check_jensen_subset(300, seed=seed),
        oracles.check_jensen_variance_gap(300, seed=seed),
        oracles.check_exp_subset(300, seed=seed),
        oracles.check_intra_conversion(300, seed=seed),
        oracles.check_inter_divide(100, seed=seed),
        oracles.check_gradients(4, seed),
    ]
    for r in results:
        assert r.violations == 0, (r.lemma, r.worst_margin)


def test_broken_bn_is_caught():
    def sample_variance_bn(X, gamma, var_eps=0.0):
        mu = X.mean(axis=0)
        std = np.sqrt(X.var(axis=0, ddof=1) + var_eps)
        return (X - mu) / std * gamma, None

    assert oracles.check_bn_norm(50, 0, bn_fn=sample_variance_bn).violations > 0


def test_wrong_jensen_modulus_is_caught():
    def inflated(C, lo, hi):
        return 50 * bounds.strong_convexity_modulus(C, lo, hi)

    assert oracles.check_jensen_subset(500, seed=0, modulus_fn=inflated).violations > 0
    assert oracles.check_jensen_variance_gap(500, seed=0, modulus_fn=inflated).violations > 0


def test_rejections_are_counted():
    r = oracles.check_intra_conversion(200, seed=1)
    assert r.rejected > 0 and r.extra["corollary_checks"] > 0


def test_min_loss_search_zero_norm():
    res = oracles.verify_min_loss(3, 3, alpha=0.0, beta=1.0, restarts=4, iters=10)
    assert res.best_loss == pytest.approx(math.log(3), abs=1e-12)


def test_min_loss_search_finds_etf():
    res = oracles.verify_min_loss(3, 3, 1.0, 1.0, restarts=50, seed=0)
    assert res.m - 1e-6 <= res.best_loss <= res.m + 1e-3
    off = res.feature_cosines()[~np.eye(3, dtype=bool)]
    npt.assert_allclose(off, -0.5, atol=1e-2)


def test_min_loss_search_other_sizes():
    res = oracles.verify_min_loss(4, 5, 1.3, 0.7, restarts=20, seed=2)
    assert res.m - 1e-6 <= res.best_loss <= res.m + 1e-3
