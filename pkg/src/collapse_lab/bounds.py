"""Closed-form minimal losses and neural-collapse proximity bounds.

Two families of bounds are evaluated with their explicit constants:

* the bounded-norm bounds, driven by the measured feature/weight norm
  product ``alpha * beta`` and the CE gap ``eps = L - m``;
* the batch-norm + weight-decay bounds, driven by ``lambda`` through
  ``rho = (C e / lambda)^(kappa C)`` and the gap ``eps = L_reg - m_reg``.

``kappa`` is an unspecified "small constant" in the theory, so it is always a
parameter and always reported next to the bounds.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

from .errors import ContractError, DomainError

NO_VIOLATION_TOL = 1e-6


def min_loss_m(C, norm_product):
    """Smallest mean CE achievable with quadratic feature norm alpha and |W|_F <= sqrt(C) beta."""
    if norm_product < 0:
        raise ContractError("norm_product must be >= 0")
    return math.log1p((C - 1) * math.exp(-C / (C - 1) * norm_product))


def logistic_curvature(C, x):
    """Second derivative of log(1 + (C-1) e^x)."""
    # equals s (1 - s) with s the logistic function at x + log(C-1)
    t = x + math.log(C - 1)
    s = 1.0 / (1.0 + math.exp(-t)) if t >= 0 else math.exp(t) / (1.0 + math.exp(t))
    return s * (1.0 - s)


def strong_convexity_modulus(C, x_lo, x_hi):
    """min of the curvature over [x_lo, x_hi]; unimodal, so an endpoint wins."""
    if x_lo > x_hi:
        raise ContractError("x_lo must not exceed x_hi")
    return min(logistic_curvature(C, x_lo), logistic_curvature(C, x_hi))


def interval_modulus(C, norm_product):
    """Exact modulus on [-C^2/(C-1) ab, C^2/(C-1) ab], the range the logits margins live in."""
    r = C * C / (C - 1) * norm_product
    return strong_convexity_modulus(C, -r, r)


def surrogate_modulus(C, norm_product, kappa=1.0):
    return math.exp(-kappa * C * norm_product)


def _check_eps_delta(epsilon, delta):
    if epsilon < 0:
        raise DomainError("epsilon must be >= 0")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if epsilon / delta >= 0.1:
        warnings.warn(f"epsilon/delta = {epsilon / delta:.3g} is not small; bounds are likely vacuous", stacklevel=3)


def bounds_t21(C, norm_product, epsilon, delta, kappa=1.0):
    """(intra lower bound, nc3 lower bound, inter upper bound) from measured norms."""
    if norm_product <= 0:
        raise DomainError("alpha * beta must be positive")
    _check_eps_delta(epsilon, delta)
    ab = norm_product
    g = math.exp(kappa * C * ab)
    intra = 1 - (C - 1) / (C * ab) * math.sqrt(128 * epsilon * (1 - delta) * g / delta)
    nc3 = 1 - 2 * math.sqrt(2 * epsilon * (1 - delta) * g / delta)
    s = math.sqrt(2 * epsilon / delta)
    q = g / ab * s
    inter = -1 / (C - 1) + C / (C - 1) * q + 4 * (2 * q) ** (1 / 3) + math.sqrt(q)
    return intra, nc3, inter


def f_lambda(gamma, C, lambda_eff):
    return math.log1p((C - 1) * math.exp(-C / (C - 1) * gamma)) + lambda_eff * gamma


def gamma_star(C, lambda_eff):
    """Minimizer of f_lambda over gamma >= 0."""
    if not 0 < lambda_eff <= 1:
        raise DomainError(f"gamma* is defined for 0 < lambda_eff <= 1, got {lambda_eff}")
    return (C - 1) / C * math.log((C - (C - 1) * lambda_eff) / lambda_eff)


def min_reg_loss(C, lam):
    """Minimum of CE + lam/2 (|gamma|^2 + |W|_F^2) under bias-free BN.

    Equals f_{sqrt(C) lam}(gamma*). Note the first term is -log(1 - ...):
    at the optimum the CE part is log(1/(1 - p)) with p = (C-1) lam_eff / C.
    """
    if not 0 < lam < 1 / math.sqrt(C):
        raise DomainError(f"need 0 < lambda < 1/sqrt(C) = {1 / math.sqrt(C):.6g}, got {lam}")
    a = (C - 1) / math.sqrt(C) * lam
    return -math.log1p(-a) + a * math.log(math.sqrt(C) / lam - (C - 1))


def rho(C, lam, kappa=1.0):
    if lam <= 0:
        raise DomainError("rho needs lambda > 0")
    return (C * math.e / lam) ** (kappa * C)


def t23_preconditions(C, lam, epsilon):
    """List of violated clauses (empty when the bounds apply)."""
    bad = []
    if not lam < 1 / math.sqrt(C):
        bad.append(f"lambda < 1/sqrt(C) fails (lambda={lam}, 1/sqrt(C)={1 / math.sqrt(C):.6g})")
    if not epsilon < lam:
        bad.append(f"epsilon < lambda fails (epsilon={epsilon}, lambda={lam})")
    return bad


def bounds_t23(C, lam, epsilon, delta, kappa=1.0, check=True):
    """(intra lower bound, nc3 lower bound, inter upper bound) from weight decay.

    With ``check=False`` the formulas are evaluated even when the
    preconditions fail, which is how raw (usually vacuous) values get reported.
    """
    if check:
        bad = t23_preconditions(C, lam, epsilon)
        if bad:
            raise DomainError("; ".join(bad))
    _check_eps_delta(epsilon, delta)
    r = rho(C, lam, kappa)
    intra = 1 - (C - 1) / C * math.sqrt(128 * r * epsilon * (1 - delta) / delta)
    nc3 = 1 - 2 * math.sqrt(2 * r * epsilon * (1 - delta) / delta)
    s = math.sqrt(2 * epsilon / delta)
    inter = -1 / (C - 1) + C * r / (C - 1) * s + 4 * (r * s) ** (1 / 3) + math.sqrt(r * s)
    return intra, nc3, inter


def epsilon_from_run(loss, reference_minimum, tol=NO_VIOLATION_TOL):
    """Gap above the reference minimum and whether the minimum was undercut."""
    violated = loss < reference_minimum - tol
    return max(loss - reference_minimum, 0.0), violated


@dataclass
class BoundParams:
    C: int
    alpha: Optional[float] = None
    beta: Optional[float] = None
    norm_product: Optional[float] = None
    epsilon: float = 0.0
    epsilon_reg: Optional[float] = None
    delta: float = 0.1
    kappa: float = 1.0
    lam: Optional[float] = None

    def __post_init__(self):
        if self.C < 3:
            raise DomainError("the bounds need C >= 3")
        if self.norm_product is None and self.alpha is not None and self.beta is not None:
            self.norm_product = self.alpha * self.beta


def _clamp(v):
    return min(1.0, max(-1.0, v))


@dataclass
class BoundReport:
    params: dict
    m: Optional[float]
    m_reg: Optional[float]
    gamma_star: Optional[float]
    rho: Optional[float]
    modulus: Optional[float]
    modulus_surrogate: Optional[float]
    intra_lb_T21: Optional[float]
    nc3_lb_T21: Optional[float]
    inter_ub_T21: Optional[float]
    intra_lb_T23: Optional[float]
    nc3_lb_T23: Optional[float]
    inter_ub_T23: Optional[float]
    t23_violations: list

    def vacuous(self):
        """Per-bound flag: a lower bound <= -1 or an upper bound >= 1 says nothing."""
        out = {}
        for key in ("intra_lb_T21", "nc3_lb_T21", "intra_lb_T23", "nc3_lb_T23"):
            v = getattr(self, key)
            out[key] = None if v is None else v <= -1
        for key in ("inter_ub_T21", "inter_ub_T23"):
            v = getattr(self, key)
            out[key] = None if v is None else v >= 1
        return out

    def to_dict(self):
        d = asdict(self)
        d["vacuous"] = self.vacuous()
        d["clamped"] = {k: (None if d[k] is None else _clamp(d[k])) for k in d["vacuous"]}
        return d


def bound_report(p: BoundParams) -> BoundReport:
    m = mod = mod_s = gs = r = m_reg = None
    t21 = t23 = (None, None, None)
    if p.norm_product is not None and p.norm_product > 0:
        m = min_loss_m(p.C, p.norm_product)
        mod = interval_modulus(p.C, p.norm_product)
        mod_s = surrogate_modulus(p.C, p.norm_product, p.kappa)
        t21 = bounds_t21(p.C, p.norm_product, p.epsilon, p.delta, p.kappa)
    violations = []
    if p.lam is not None:
        eps = p.epsilon if p.epsilon_reg is None else p.epsilon_reg
        violations = t23_preconditions(p.C, p.lam, eps)
        if p.lam >= 1 / math.sqrt(p.C):
            raise DomainError(violations[0])
        m_reg = min_reg_loss(p.C, p.lam)
        gs = gamma_star(p.C, math.sqrt(p.C) * p.lam)
        r = rho(p.C, p.lam, p.kappa)
        t23 = bounds_t23(p.C, p.lam, eps, p.delta, p.kappa, check=False)
    return BoundReport(asdict(p), m, m_reg, gs, r, mod, mod_s, *t21, *t23, violations)
