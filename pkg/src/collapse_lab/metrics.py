"""Cosine-similarity measures of neural collapse.

Intra/inter-class similarities are computed through the per-class mean of
*normalized* feature vectors ``t_c``: the double-averaged pairwise cosine
within a class equals ``|t_c|^2`` and across two classes equals ``t_c . t_c'``.
This turns the O(N^2) definitions into O(N d) work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ContractError, DegenerateFeatureError

ZERO_NORM_TOL = 1e-12


@dataclass(frozen=True)
class FeatureSet:
    """Last-layer features grouped by class, shape ``(C, N, d)``."""

    h: np.ndarray

    def __post_init__(self):
        if self.h.ndim != 3:
            raise ContractError(f"features must have shape (C, N, d), got {self.h.shape}")

    @classmethod
    def from_labels(cls, features, labels, n_classes=None) -> "FeatureSet":
        features = np.asarray(features)
        labels = np.asarray(labels)
        C = int(labels.max()) + 1 if n_classes is None else int(n_classes)
        counts = np.bincount(labels, minlength=C)
        if len(counts) != C or np.any(counts != counts[0]):
            raise ContractError(f"unbalanced classes: counts {counts.tolist()}")
        order = np.argsort(labels, kind="stable")
        return cls(features[order].reshape(C, counts[0], features.shape[1]))

    @property
    def n_classes(self):
        return self.h.shape[0]

    @property
    def n_per_class(self):
        return self.h.shape[1]

    @property
    def dim(self):
        return self.h.shape[2]

    def class_means(self):
        return self.h.mean(axis=1)

    def global_mean(self):
        return self.h.reshape(-1, self.dim).mean(axis=0)

    def centered(self) -> "FeatureSet":
        return FeatureSet(self.h - self.global_mean())

    def normalized(self) -> np.ndarray:
        norms = np.linalg.norm(self.h, axis=2)
        bad = np.argwhere(norms <= ZERO_NORM_TOL)
        if len(bad):
            c, i = (int(v) for v in bad[0])
            raise DegenerateFeatureError(f"feature vector (class {c}, sample {i}) has zero norm", c, i)
        return self.h / norms[..., None]

    def normalized_means(self) -> np.ndarray:
        """Per-class mean of unit-normalized features, shape ``(C, d)``."""
        return self.normalized().mean(axis=1)


@dataclass(frozen=True)
class WeightView:
    W: np.ndarray

    @property
    def mean_row(self):
        return self.W.mean(axis=0)

    @property
    def centered(self):
        return self.W - self.mean_row

    @property
    def beta(self):
        return float(np.linalg.norm(self.W) / math.sqrt(self.W.shape[0]))

    @property
    def beta_c(self):
        return np.linalg.norm(self.centered, axis=1)


def _prepare(features: FeatureSet, centering: bool) -> FeatureSet:
    return features.centered() if centering else features


def intra_class(features: FeatureSet, c: int, centering=False) -> float:
    t = _prepare(features, centering).normalized_means()[c]
    return float(t @ t)


def inter_class(features: FeatureSet, c: int, c2: int, centering=False) -> float:
    if c == c2:
        raise ContractError("inter_class needs two distinct classes")
    t = _prepare(features, centering).normalized_means()
    return float(t[c] @ t[c2])


def _cos(u, v, what):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= ZERO_NORM_TOL or nv <= ZERO_NORM_TOL:
        raise DegenerateFeatureError(f"degenerate norm in {what}")
    return float(u @ v / (nu * nv))


def nc3_cos(W, features: FeatureSet, c: int, centering=False) -> float:
    """cos(centered weight row c, class-c feature mean)."""
    wv = W if isinstance(W, WeightView) else WeightView(np.asarray(W))
    means = _prepare(features, centering).class_means()
    return _cos(wv.centered[c], means[c], f"nc3 for class {c}")


def nc3_cos_normalized(W, features: FeatureSet, c: int, centering=False) -> float:
    """Same as :func:`nc3_cos` but against the mean of normalized features."""
    wv = W if isinstance(W, WeightView) else WeightView(np.asarray(W))
    t = _prepare(features, centering).normalized_means()
    return _cos(wv.centered[c], t[c], f"normalized nc3 for class {c}")


def norm_stats(features: FeatureSet, W):
    """Quadratic-mean feature norms (global and per class) and weight norms."""
    wv = W if isinstance(W, WeightView) else WeightView(np.asarray(W))
    sq = np.sum(features.h * features.h, axis=2)
    alpha_c = np.sqrt(sq.mean(axis=1))
    alpha = float(np.sqrt(sq.mean()))
    return alpha, wv.beta, alpha_c, wv.beta_c


@dataclass
class NcReport:
    centering: bool
    C: int
    N: int
    intra: np.ndarray
    inter: list  # (c, c', value) over unordered pairs
    nc3: np.ndarray
    min_intra: float
    max_inter: float
    avg_intra: float
    avg_inter: float
    avg_nc3: float
    alpha: float
    beta: float
    alpha_c: np.ndarray
    beta_c: np.ndarray

    def to_dict(self) -> dict:
        return {
            "centering": self.centering,
            "C": self.C,
            "N": self.N,
            "intra": [float(v) for v in self.intra],
            "inter": [[int(a), int(b), float(v)] for a, b, v in self.inter],
            "nc3": [float(v) for v in self.nc3],
            "min_intra": self.min_intra,
            "max_inter": self.max_inter,
            "avg_intra": self.avg_intra,
            "avg_inter": self.avg_inter,
            "avg_nc3": self.avg_nc3,
            "alpha": self.alpha,
            "beta": self.beta,
            "alpha_c": [float(v) for v in self.alpha_c],
            "beta_c": [float(v) for v in self.beta_c],
        }


def summarize(features: FeatureSet, W, centering=True) -> NcReport:
    C = features.n_classes
    if C < 2:
        raise ContractError("summarize needs at least two classes")
    wv = W if isinstance(W, WeightView) else WeightView(np.asarray(W))
    if wv.W.shape != (C, features.dim):
        raise ContractError(f"weight shape {wv.W.shape} does not match features ({C}, {features.dim})")
    prepared = _prepare(features, centering)
    t = prepared.normalized_means()
    gram = t @ t.T
    intra = np.clip(np.diag(gram).copy(), -1.0, 1.0)
    inter = [(a, b, float(np.clip(gram[a, b], -1.0, 1.0))) for a, b in combinations(range(C), 2)]
    means = prepared.class_means()
    nc3 = np.array([_cos(wv.centered[c], means[c], f"nc3 for class {c}") for c in range(C)])
    # norms are measured on raw features: they feed the bounds, which are stated for h itself
    alpha, beta, alpha_c, beta_c = norm_stats(features, wv)
    inter_vals = np.array([v for _, _, v in inter])
    return NcReport(
        centering=bool(centering),
        C=C,
        N=features.n_per_class,
        intra=intra,
        inter=inter,
        nc3=nc3,
        min_intra=float(intra.min()),
        max_inter=float(inter_vals.max()),
        avg_intra=float(intra.mean()),
        avg_inter=float(inter_vals.mean()),
        avg_nc3=float(nc3.mean()),
        alpha=alpha,
        beta=beta,
        alpha_c=alpha_c,
        beta_c=beta_c,
    )
