"""Deterministic synthetic datasets and simplex-ETF feature fixtures."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError, GeneratorDegenerateError, ParseError
from .metrics import FeatureSet

MAGIC = b"CLDS"
FORMAT_VERSION = 1
# magic, version, C, N_per, d, seed, descriptor byte length
_HEADER = struct.Struct("<4sHIIIqI")
ATTEMPTS_PER_SAMPLE = 100
_CHUNK = 4096


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    C: int
    n_per_class: int
    d: int
    seed: int
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape != (self.C * self.n_per_class, self.d) or self.y.shape != (len(self.X),):
            raise ContractError("dataset arrays do not match (C, n_per_class, d)")

    def class_counts(self):
        return np.bincount(self.y, minlength=self.C)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.C, self.n_per_class, self.d, self.seed, self.descriptor)
            == (other.C, other.n_per_class, other.d, other.seed, other.descriptor)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )


def _fill_balanced(rng, d, C, n_per_class, label_fn, what):
    """Rejection-sample x ~ N(0, I_d) until every class holds n_per_class rows."""
    buckets = [[] for _ in range(C)]
    counts = np.zeros(C, dtype=int)
    budget = ATTEMPTS_PER_SAMPLE * C * n_per_class
    drawn = 0
    while counts.min() < n_per_class:
        if drawn >= budget:
            starved = [c for c in range(C) if counts[c] < n_per_class]
            raise GeneratorDegenerateError(
                f"{what}: classes {starved} still short after {drawn} draws; re-seed the generator"
            )
        x = rng.standard_normal((_CHUNK, d))
        labels = label_fn(x)
        drawn += _CHUNK
        for c in range(C):
            need = n_per_class - counts[c]
            if need <= 0:
                continue
            rows = x[labels == c][:need]
            if len(rows):
                buckets[c].append(rows)
                counts[c] += len(rows)
    X = np.concatenate([np.concatenate(b) for b in buckets])
    y = np.repeat(np.arange(C), n_per_class)
    return X, y


def sign_code_labels(X, normals, C):
    """Binary sign code of ``X`` against hyperplane normals, first normal as MSB.

    Codes >= C (non power-of-two C) fold round-robin onto the first classes.
    """
    bits = (X @ normals.T >= 0).astype(int)
    k = normals.shape[0]
    code = bits @ (1 << np.arange(k - 1, -1, -1))
    return np.where(code >= C, (code - C) % C, code)


def gen_conic_hull(d, C, n_per_class, seed, normals=None) -> Dataset:
    if C < 2 or d < 2 or n_per_class < 1:
        raise ContractError("conic hull needs C >= 2, d >= 2, n_per_class >= 1")
    rng = np.random.default_rng(seed)
    k = max(1, math.ceil(math.log2(C)))
    if normals is None:
        normals = rng.standard_normal((k, d))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    else:
        normals = np.asarray(normals, dtype=np.float64)
        if normals.shape != (k, d):
            raise ContractError(f"expected {k} normals of dimension {d}")
    X, y = _fill_balanced(rng, d, C, n_per_class, lambda x: sign_code_labels(x, normals, C), "conic hull")
    desc = {"generator": "conic_hull", "normals": normals.tolist()}
    return Dataset(X, y, C, n_per_class, d, seed, desc)


@dataclass
class GeneratorMlp:
    """Small ReLU MLP whose argmax labels the inputs."""

    weights: list
    biases: list

    @classmethod
    def random(cls, d, widths, rng):
        weights, biases = [], []
        fan_in = d
        for w in widths:
            weights.append(rng.standard_normal((w, fan_in)) * math.sqrt(2.0 / fan_in))
            biases.append(rng.standard_normal(w) * 0.1)
            fan_in = w
        return cls(weights, biases)

    def logits(self, X):
        a = X
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W.T + b
            if l < len(self.weights) - 1:
                a = np.maximum(a, 0.0)
        return a

    def labels(self, X):
        # np.argmax returns the first maximum: ties go to the lowest index
        return np.argmax(self.logits(X), axis=1)

    def n_params(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


def gen_mlp_labeled(d, C, n_per_class, seed, gen_widths=(16, 16, 4), generator: Optional[GeneratorMlp] = None) -> Dataset:
    """Inputs x ~ N(0, I_d) labelled by a random 3-layer MLP, balanced by rejection."""
    if C < 2 or n_per_class < 1:
        raise ContractError("mlp-labelled data needs C >= 2 and n_per_class >= 1")
    rng = np.random.default_rng(seed)
    if generator is None:
        if gen_widths[-1] != C:
            raise ContractError(f"generator output width {gen_widths[-1]} != C={C}")
        generator = GeneratorMlp.random(d, list(gen_widths), rng)
    X, y = _fill_balanced(rng, d, C, n_per_class, generator.labels, "mlp-labelled")
    desc = {"generator": "mlp_labeled", "gen_widths": [int(w) for w in gen_widths]}
    return Dataset(X, y, C, n_per_class, d, seed, desc)


@dataclass
class EtfFixture:
    vertices: np.ndarray  # (C, d), unit rows
    features: FeatureSet
    C: int
    d: int
    n_per_class: int
    eta: float
    scale: float


def simplex_etf(C, d, rng=None) -> np.ndarray:
    """C unit vectors in R^d with pairwise inner product -1/(C-1), summing to 0."""
    if C < 2:
        raise ContractError("an ETF needs C >= 2")
    if d < C - 1:
        raise DimensionError(f"simplex ETF with C={C} needs d >= {C - 1}, got {d}")
    M = math.sqrt(C / (C - 1)) * (np.eye(C) - np.full((C, C), 1.0 / C))
    # orthonormal basis of the complement of the all-ones direction
    q, _ = np.linalg.qr(np.column_stack([np.ones(C), np.eye(C)[:, : C - 1]]))
    basis = q[:, 1:C]
    V = M @ basis  # (C, C-1)
    if rng is None:
        embed = np.eye(C - 1, d)
    else:
        embed = np.linalg.qr(rng.standard_normal((d, C - 1)))[0].T
    return V @ embed


def gen_simplex_etf(C, d, n_per_class, noise_eta=0.0, seed=0, scale=1.0) -> EtfFixture:
    rng = np.random.default_rng(seed)
    vertices = simplex_etf(C, d, rng)
    h = np.repeat(vertices[:, None, :] * scale, n_per_class, axis=1)
    if noise_eta:
        h = h + noise_eta * rng.standard_normal(h.shape)
    return EtfFixture(vertices, FeatureSet(h), C, d, n_per_class, noise_eta, scale)


# --------------------------------------------------------------------------
# serialization


def save_dataset(ds: Dataset, path):
    desc = json.dumps(ds.descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.C, ds.n_per_class, ds.d, ds.seed, len(desc)))
        fh.write(desc)
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.y, dtype="<i4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ParseError("file shorter than header", offset=len(raw))
    magic, version, C, n_per, d, seed, dlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    pos = _HEADER.size
    n = C * n_per
    expected = pos + dlen + 8 * n * d + 4 * n
    if len(raw) != expected:
        raise ParseError(f"expected {expected} bytes, found {len(raw)}", offset=min(len(raw), expected))
    try:
        descriptor = json.loads(raw[pos:pos + dlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad descriptor: {exc}", offset=pos) from None
    pos += dlen
    X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    pos += 8 * n * d
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=pos).astype(np.int64)
    if n and (y.min() < 0 or y.max() >= C):
        raise ParseError("label out of range", offset=pos)
    return Dataset(X, y, C, n_per, d, seed, descriptor)


def export_csv(ds: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(ds.d)] + ["label"])
        for row, label in zip(ds.X, ds.y):
            w.writerow([format(v, ".17g") for v in row] + [int(label)])


def import_csv(path, seed=0) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][-1] != "label":
        raise ParseError("missing header with trailing 'label' column", line=1)
    d = len(rows[0]) - 1
    X, y = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(row)}", line=lineno)
        try:
            X.append([float(v) for v in row[:-1]])
            y.append(int(row[-1]))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    y = np.array(y, dtype=np.int64)
    C = int(y.max()) + 1
    counts = np.bincount(y, minlength=C)
    if np.any(counts != counts[0]):
        raise ParseError("csv dataset is not balanced")
    order = np.argsort(y, kind="stable")
    return Dataset(np.array(X)[order], y[order], C, int(counts[0]), d, seed, {"generator": "csv"})
