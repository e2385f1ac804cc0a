"""Brute-force numerical checks of the supporting lemmas.

Each ``check_*`` draws random instances, evaluates both sides of an
inequality directly (enumerating subsets where the statement quantifies over
them) and counts violations beyond a fixed 1e-9 slack on the bound side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import bounds, nn
from .metrics import FeatureSet, inter_class, intra_class

SLACK = 1e-9
ENUM_MAX_N = 12
SAMPLED_SUBSETS = 10_000


@dataclass
class LemmaCheckResult:
    lemma: str
    trials: int
    violations: int = 0
    worst_margin: float = -math.inf  # max over checks of (lhs - rhs); > 0 means violated
    rejected: int = 0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.violations == 0

    def observe(self, margins):
        margins = np.atleast_1d(np.asarray(margins, dtype=float))
        if margins.size:
            self.worst_margin = max(self.worst_margin, float(margins.max()))
            self.violations += int(np.sum(margins > 0))


def _trial_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _rng_stream(seed):
    """Unbounded sequence of independent per-trial generators."""
    root = np.random.SeedSequence(seed)
    while True:
        yield np.random.default_rng(root.spawn(1)[0])


@lru_cache(maxsize=None)
def _all_proper_subsets(n):
    codes = np.arange(1, 2**n - 1)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(float)


def subset_masks(n, rng):
    """0/1 matrix of proper non-empty subsets: exhaustive up to 12, sampled above."""
    if n <= ENUM_MAX_N:
        return _all_proper_subsets(n)
    sizes = rng.integers(1, n, size=SAMPLED_SUBSETS)
    keys = rng.random((SAMPLED_SUBSETS, n))
    ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
    return (ranks < sizes[:, None]).astype(float)


def _square(x):
    return x * x


def _random_xs(rng, n):
    kind = rng.integers(3)
    if kind == 0:
        return rng.normal(0, rng.uniform(0.01, 3), n)
    if kind == 1:  # a few outliers around a cluster
        xs = rng.normal(rng.uniform(-2, 2), 0.05, n)
        k = min(n, int(rng.integers(1, max(2, n // 3) + 1)))
        xs[:k] += rng.normal(0, 2, k)
        return xs
    return rng.uniform(-4, 4, n)


def _convex_case(rng, xs, modulus_fn):
    """Pick f in {x^2, log(1 + (C-1) e^x)} and its modulus on [min xs, max xs]."""
    if rng.random() < 0.5:
        return _square, 2.0, "square"
    C = int(rng.integers(3, 11))
    f = lambda x: np.log1p((C - 1) * np.exp(x))  # noqa: E731
    return f, modulus_fn(C, float(xs.min()), float(xs.max())), f"logistic C={C}"


def check_jensen_subset(trials=10_000, n_max=ENUM_MAX_N, seed=0, modulus_fn=bounds.strong_convexity_modulus):
    """Subset means stay within sqrt(2 eps (1-delta) / (m delta)) of the mean."""
    res = LemmaCheckResult("jensen_subset", trials, config={"n_max": n_max, "seed": seed})
    for rng in _trial_rngs(seed, trials):
        n = int(rng.integers(2, n_max + 1))
        xs = _random_xs(rng, n)
        f, m, _ = _convex_case(rng, xs, modulus_fn)
        mean = xs.mean()
        eps = max(float(np.mean(f(xs)) - f(mean)), 0.0)
        masks = subset_masks(n, rng)
        sizes = masks.sum(axis=1)
        delta = sizes / n
        dev = np.abs(masks @ xs / sizes - mean)
        bound = np.sqrt(2 * eps * (1 - delta) / (m * delta))
        res.observe(dev - bound - SLACK)
    return res


def check_jensen_variance_gap(trials=10_000, seed=0, n_max=32, modulus_fn=bounds.strong_convexity_modulus):
    """Population variance <= 2 eps / m for an m-strongly-convex f."""
    res = LemmaCheckResult("jensen_variance_gap", trials, config={"n_max": n_max, "seed": seed})
    for rng in _trial_rngs(seed, trials):
        n = int(rng.integers(1, n_max + 1))
        xs = _random_xs(rng, n)
        f, m, _ = _convex_case(rng, xs, modulus_fn)
        eps = float(np.mean(f(xs)) - f(xs.mean()))
        res.observe(np.var(xs) - 2 * eps / m - SLACK)
    return res


def check_exp_subset(trials=10_000, n_max=ENUM_MAX_N, seed=0):
    """Upper bound on subset means from the Jensen gap of exp."""
    res = LemmaCheckResult("exp_subset", trials, config={"n_max": n_max, "seed": seed})
    for rng in _trial_rngs(seed, trials):
        n = int(rng.integers(2, n_max + 1))
        xs = _random_xs(rng, n)
        mean = xs.mean()
        eps = max(float(np.mean(np.exp(xs)) - math.exp(mean)), 0.0)
        masks = subset_masks(n, rng)
        delta = masks.sum(axis=1) / n
        sub = masks @ xs / masks.sum(axis=1)
        res.observe(sub - (mean + np.sqrt(2 * eps / (delta * math.exp(mean)))) - SLACK)
    return res


def _clustered_vectors(rng, n, d, u):
    spread = rng.uniform(0.0, 0.8)
    v = u + spread * rng.standard_normal((n, d))
    if rng.random() < 0.3:  # some vectors pointing away from u
        k = int(rng.integers(1, max(2, n // 5) + 1))
        v[:k] = -rng.uniform(0, 1) * v[:k]
    return v * rng.uniform(0.2, 3.0, size=(n, 1))


def check_intra_conversion(trials=10_000, seed=0):
    """|mean of normalized v_i| >= 2 (c/alpha)^2 - 1 when <u, mean v> = c in [alpha/sqrt2, alpha].

    Both the unit-``u`` form and the corollary (``u`` = direction of the mean)
    are checked on every accepted draw; rejected draws are counted.
    """
    res = LemmaCheckResult("intra_conversion", trials, config={"seed": seed})
    corollary = 0
    accepted = 0
    rngs = _rng_stream(seed)
    while accepted < trials:
        rng = next(rngs)
        n = int(rng.integers(1, 41))
        d = int(rng.integers(2, 9))
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        v = _clustered_vectors(rng, n, d, u)
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms <= 1e-12):
            res.rejected += 1
            continue
        alpha = math.sqrt(np.mean(norms**2)) * (1 + rng.choice([0.0, rng.uniform(0, 0.1)]))
        vbar = v.mean(axis=0)
        tbar_norm = float(np.linalg.norm((v / norms[:, None]).mean(axis=0)))
        c = float(u @ vbar)
        if not alpha / math.sqrt(2) <= c <= alpha:
            res.rejected += 1
            continue
        accepted += 1
        res.observe(2 * (c / alpha) ** 2 - 1 - tbar_norm - SLACK)
        c2 = float(np.linalg.norm(vbar))
        if alpha / math.sqrt(2) <= c2 <= alpha:
            corollary += 1
            res.observe(2 * (c2 / alpha) ** 2 - 1 - tbar_norm - SLACK)
    res.extra["corollary_checks"] = corollary
    return res


def check_inter_divide(trials=1_000, seed=0, eps_ratio_max=1e-2):
    """cos(w, mean normalized h) <= -c/(alpha beta) + 4 (eps/(alpha beta))^(1/3).

    Conforming draws: ``alpha`` is the exact quadratic-mean norm, ``eps`` the
    smallest value meeting ``|mean h| >= alpha - eps/beta``, and a draw is
    accepted when ``w . mean h = c < 0`` and ``eps / (alpha beta) <= eps_ratio_max``.
    The sharper form with ``+c`` (what the argument actually derives) is
    tallied separately in ``extra``.
    """
    res = LemmaCheckResult("inter_divide", trials, config={"seed": seed, "eps_ratio_max": eps_ratio_max})
    sharp = LemmaCheckResult("inter_divide_sharp", trials)
    accepted = 0
    rngs = _rng_stream(seed)
    while accepted < trials:
        rng = next(rngs)
        n = int(rng.integers(1, 41))
        d = int(rng.integers(2, 9))
        e = rng.standard_normal(d)
        e /= np.linalg.norm(e)
        h = e + 10 ** rng.uniform(-4, -1) * rng.standard_normal((n, d))
        h *= (1 + 10 ** rng.uniform(-4, -1) * rng.standard_normal((n, 1))) * rng.uniform(0.2, 5)
        norms = np.linalg.norm(h, axis=1)
        alpha = math.sqrt(np.mean(norms**2))
        hbar = h.mean(axis=0)
        beta = rng.uniform(0.2, 5)
        w = rng.standard_normal(d)
        if rng.random() < 0.5:
            w -= rng.uniform(0.5, 3) * e  # bias towards negative alignment
        w *= beta * rng.uniform(0.5, 1.0) / np.linalg.norm(w)
        c = float(w @ hbar)
        eps = max(beta * (alpha - float(np.linalg.norm(hbar))), 0.0)
        if c >= 0 or eps / (alpha * beta) > eps_ratio_max or np.any(norms <= 1e-12):
            res.rejected += 1
            continue
        accepted += 1
        t = (h / norms[:, None]).mean(axis=0)
        cos = float(w @ t / (np.linalg.norm(w) * np.linalg.norm(t)))
        slack_term = 4 * (eps / (alpha * beta)) ** (1 / 3)
        res.observe(cos - (-c / (alpha * beta) + slack_term) - SLACK)
        sharp.observe(cos - (c / (alpha * beta) + slack_term) - SLACK)
    res.extra["sharp_violations"] = sharp.violations
    res.extra["sharp_worst_margin"] = sharp.worst_margin
    return res


def _random_partition(rng, n):
    """Batch sizes >= 2 summing to n (n >= 2), usually unequal."""
    sizes = []
    left = n
    while left > 0:
        if left <= 3:
            s = left
        else:
            s = int(rng.integers(2, left - 1)) if rng.random() < 0.5 else left
        sizes.append(s)
        left -= s
    return sizes


def check_bn_norm(trials=200, seed=0, bn_fn=nn.bn_forward):
    """Quadratic-mean norm after bias-free BN equals |gamma|, across batch partitions."""
    res = LemmaCheckResult("bn_norm", trials, config={"seed": seed})
    for rng in _trial_rngs(seed, trials):
        d = int(rng.integers(1, 65))
        n = int(rng.integers(2, 257))
        X = rng.standard_normal((n, d)) * rng.uniform(0.1, 10, d) + rng.uniform(-5, 5, d)
        gamma = np.zeros(d) if rng.random() < 0.05 else rng.normal(0, 2, d)
        outs, start = [], 0
        for s in _random_partition(rng, n):
            outs.append(bn_fn(X[start:start + s], gamma, 0.0)[0])
            start += s
        H = np.concatenate(outs)
        qm = math.sqrt(np.mean(np.sum(H * H, axis=1)))
        res.observe(abs(qm - float(np.linalg.norm(gamma))) - SLACK)
    return res


def brute_intra(hc):
    """O(N^2) double loop over pairwise cosines within one class."""
    n = len(hc)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += hc[i] @ hc[j] / (np.linalg.norm(hc[i]) * np.linalg.norm(hc[j]))
    return total / (n * n)


def brute_inter(hc, hc2):
    total = 0.0
    for a in hc:
        for b in hc2:
            total += a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return total / (len(hc) * len(hc2))


def check_metric_identity(trials=100, seed=0):
    """Normalized-mean formulas against the O(N^2) definitions."""
    res = LemmaCheckResult("metric_identity", trials, config={"seed": seed})
    for rng in _trial_rngs(seed, trials):
        C = int(rng.integers(2, 6))
        N = int(rng.integers(1, 13))
        d = int(rng.integers(2, 9))
        fs = FeatureSet(rng.standard_normal((C, N, d)) + rng.normal(0, 2, (C, 1, d)))
        for c in range(C):
            res.observe(abs(intra_class(fs, c) - brute_intra(fs.h[c])) - 1e-10)
        for c in range(C):
            for c2 in range(c + 1, C):
                res.observe(abs(inter_class(fs, c, c2) - brute_inter(fs.h[c], fs.h[c2])) - 1e-10)
    return res


def check_gradients(trials=6, seed=0, threshold=1e-4):
    """backward vs central differences on random small models, with and without BN."""
    res = LemmaCheckResult("gradient_fidelity", trials, config={"seed": seed, "threshold": threshold})
    for k, rng in enumerate(_trial_rngs(seed, trials)):
        widths = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 4)))] + [int(rng.integers(2, 5))]
        cfg = nn.MlpConfig(widths, use_bn=bool(k % 2), use_biases=bool(rng.random() < 0.5), var_eps=1e-5)
        model = nn.MlpModel.init(cfg, int(rng.integers(1 << 30)))
        if model.hidden_biases is not None:
            # zero biases put fully-dead samples exactly on the next ReLU kink
            for b in model.hidden_biases:
                b[:] = rng.normal(0, 0.5, b.shape)
        if model.bn_gamma is not None:
            model.bn_gamma[:] = rng.normal(1, 0.5, model.bn_gamma.shape)
        X = rng.standard_normal((int(rng.integers(4, 10)), widths[0]))
        y = rng.integers(0, widths[-1], len(X))
        err = nn.grad_check(model, X, y, 1e-5, wd_lambda=float(rng.uniform(0, 0.1)), wd_scope="all_layers")
        res.observe(err - threshold)
    return res


# --------------------------------------------------------------------------
# constrained minimal-loss search


@dataclass
class MinLossResult:
    C: int
    d: int
    alpha: float
    beta: float
    best_loss: float
    m: float
    features: np.ndarray
    weights: np.ndarray
    restarts: int

    @property
    def gap(self):
        return self.best_loss - self.m

    def feature_cosines(self):
        H = self.features
        norms = np.linalg.norm(H, axis=1)
        return (H @ H.T) / np.outer(norms, norms)


def _ce_unconstrained(W, H):
    Z = np.einsum("rcd,rkd->rck", H, W)
    Z = Z - Z.max(axis=2, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=2, keepdims=True))
    C = H.shape[1]
    return -logp[:, np.arange(C), np.arange(C)].mean(axis=1), np.exp(logp)


def verify_min_loss(C=3, d=3, alpha=1.0, beta=1.0, restarts=50, seed=0, iters=4000, lr=0.5):
    """Projected gradient descent on mean CE over (W, h_1..h_C), N = 1 per class.

    Constraints: |W|_F <= sqrt(C) beta and sqrt(mean |h_c|^2) <= alpha. All
    restarts run together as one batched problem.
    """
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((restarts, C, d))
    H = rng.standard_normal((restarts, C, d))
    w_cap = math.sqrt(C) * beta
    h_cap = math.sqrt(C) * alpha

    def project(A, cap):
        norms = np.linalg.norm(A.reshape(len(A), -1), axis=1)
        scale = np.where(norms > cap, cap / np.maximum(norms, 1e-300), 1.0)
        return A * scale[:, None, None]

    W, H = project(W, w_cap), project(H, h_cap)
    eye = np.eye(C)
    for _ in range(iters):
        _, P = _ce_unconstrained(W, H)
        G = (P - eye) / C  # dL/dZ for each restart
        gW = np.einsum("rck,rcd->rkd", G, H)
        gH = np.einsum("rck,rkd->rcd", G, W)
        W = project(W - lr * gW, w_cap)
        H = project(H - lr * gH, h_cap)
    losses, _ = _ce_unconstrained(W, H)
    best = int(np.argmin(losses))
    return MinLossResult(C, d, alpha, beta, float(losses[best]), bounds.min_loss_m(C, alpha * beta), H[best], W[best], restarts)


def run_all(seed=0, quick=False):
    """Every check used by the ``verify`` command, in a fixed order."""
    scale = 10 if quick else 1
    results = [
        check_bn_norm(200, seed),
        check_metric_identity(100 // scale, seed),
        check_jensen_subset(10_000 // scale, seed=seed),
        check_jensen_variance_gap(10_000 // scale, seed=seed),
        check_exp_subset(10_000 // scale, seed=seed),
        check_intra_conversion(10_000 // scale, seed=seed),
        check_inter_divide(1_000 // scale, seed=seed),
        check_gradients(6, seed),
    ]
    ml = verify_min_loss(3, 3, 1.0, 1.0, restarts=50, seed=seed)
    r = LemmaCheckResult("min_loss", ml.restarts, config={"C": 3, "d": 3, "alpha": 1.0, "beta": 1.0})
    r.observe([ml.m - 1e-6 - ml.best_loss, ml.best_loss - (ml.m + 1e-3)])
    off = ml.feature_cosines()[~np.eye(3, dtype=bool)]
    r.observe(np.abs(off + 0.5) - 1e-2)
    r.extra.update(best_loss=ml.best_loss, m=ml.m)
    results.append(r)
    return results
