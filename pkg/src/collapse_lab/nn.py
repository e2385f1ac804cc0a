"""Bias-free MLP with optional batch normalization, trained with Adam.

Layer layout for ``layer_widths = [d_in, h_1, ..., h_{L-1}, C]``::

    x -> W1 -> ReLU -> ... -> W_{L-1} -> ReLU -> [BN(gamma)] -> W_L -> logits

The last-layer features ``h`` are the BN output (or the last ReLU output when
BN is off). A single-layer model has no hidden layer and its features are the
inputs. The final linear layer and BN never carry a bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import metrics
from .errors import ContractError, DegenerateBatchError, DivergenceError

WD_SCOPES = ("last_layer_and_gamma", "all_layers")
_DTYPES = {"float32": np.float32, "float64": np.float64}

CHECKPOINT_FORMAT = "collapse-lab-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class MlpConfig:
    layer_widths: list
    use_bn: bool = False
    use_biases: bool = False
    dtype: str = "float64"
    var_eps: float = 1e-5

    def __post_init__(self):
        self.layer_widths = [int(w) for w in self.layer_widths]
        if len(self.layer_widths) < 2 or any(w <= 0 for w in self.layer_widths):
            raise ContractError(f"layer_widths must hold >= 2 positive ints, got {self.layer_widths}")
        if self.dtype not in _DTYPES:
            raise ContractError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        if self.var_eps < 0:
            raise ContractError("var_eps must be non-negative")
        if self.use_bn and len(self.layer_widths) < 2:
            raise ContractError("BN needs at least one linear layer after it")

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def n_classes(self):
        return self.layer_widths[-1]

    @property
    def feature_dim(self):
        return self.layer_widths[-2]

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class BnStats:
    mu: np.ndarray
    sigma: np.ndarray
    var_eps: float


@dataclass
class MlpModel:
    config: MlpConfig
    weights: list
    hidden_biases: Optional[list] = None
    bn_gamma: Optional[np.ndarray] = None
    rng_seed: int = 0
    gamma_frozen: bool = False

    @classmethod
    def init(cls, config: MlpConfig, seed: int = 0) -> "MlpModel":
        """He-normal weights from a seeded stream; gamma starts at ones."""
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        dt = config.np_dtype
        widths = config.layer_widths
        weights = [
            (rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)).astype(dt)
            for fan_in, fan_out in zip(widths[:-1], widths[1:])
        ]
        biases = None
        if config.use_biases:
            biases = [np.zeros(w, dtype=dt) for w in widths[1:-1]]
        gamma = np.ones(config.feature_dim, dtype=dt) if config.use_bn else None
        return cls(config, weights, biases, gamma, seed)

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.config,
            [w.copy() for w in self.weights],
            None if self.hidden_biases is None else [b.copy() for b in self.hidden_biases],
            None if self.bn_gamma is None else self.bn_gamma.copy(),
            self.rng_seed,
            self.gamma_frozen,
        )

    def parameters(self) -> dict:
        """Name -> array view of every parameter (trainable or frozen)."""
        params = {f"W{l}": w for l, w in enumerate(self.weights)}
        if self.hidden_biases is not None:
            params.update({f"b{l}": b for l, b in enumerate(self.hidden_biases)})
        if self.bn_gamma is not None:
            params["gamma"] = self.bn_gamma
        return params

    def trainable_names(self) -> list:
        return [k for k in self.parameters() if not (k == "gamma" and self.gamma_frozen)]

    @property
    def last_weight(self) -> np.ndarray:
        return self.weights[-1]


@dataclass
class Trace:
    model: MlpModel
    inputs: list  # input of each linear layer
    pre_acts: list  # hidden pre-activations
    relu_out: Optional[np.ndarray]
    xhat: Optional[np.ndarray]
    bn_std: Optional[np.ndarray]
    features: np.ndarray
    logits: np.ndarray


def bn_forward(X, gamma, var_eps=0.0):
    """Bias-free batch norm with population variance.

    Returns the normalized batch scaled by ``gamma`` and the batch statistics.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError(f"bn_forward needs a (batch >= 2, d) matrix, got shape {X.shape}")
    mu = X.mean(axis=0)
    centered = X - mu
    var = np.mean(centered * centered, axis=0)
    if var_eps == 0 and np.any(var == 0):
        bad = np.flatnonzero(var == 0).tolist()
        raise DegenerateBatchError(f"zero batch variance in dimensions {bad} with var_eps=0")
    std = np.sqrt(var + var_eps)
    return centered / std * gamma, BnStats(mu, std, var_eps)


def forward(model: MlpModel, X, mode="train"):
    """Run the network; returns ``(logits, features, trace)``."""
    if mode not in ("train", "full_batch_eval"):
        raise ContractError(f"unknown mode {mode!r}")
    cfg = model.config
    X = np.asarray(X, dtype=cfg.np_dtype)
    if X.ndim != 2 or X.shape[1] != cfg.layer_widths[0]:
        raise ContractError(f"input shape {X.shape} does not match input width {cfg.layer_widths[0]}")
    inputs, pre_acts = [], []
    a = X
    for l in range(cfg.n_layers - 1):
        inputs.append(a)
        z = a @ model.weights[l].T
        if model.hidden_biases is not None:
            z = z + model.hidden_biases[l]
        pre_acts.append(z)
        a = np.maximum(z, 0.0)
    relu_out = a
    xhat = std = None
    if cfg.use_bn:
        mu = a.mean(axis=0)
        centered = a - mu
        var = np.mean(centered * centered, axis=0)
        if cfg.var_eps == 0 and np.any(var == 0):
            raise DegenerateBatchError("zero batch variance in the BN layer with var_eps=0")
        std = np.sqrt(var + cfg.var_eps)
        xhat = centered / std
        a = xhat * model.bn_gamma
    features = a
    inputs.append(features)
    logits = features @ model.weights[-1].T
    return logits, features, Trace(model, inputs, pre_acts, relu_out, xhat, std, features, logits)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_loss(logits, labels) -> float:
    """Mean cross-entropy via max-shifted log-sum-exp."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(logits)):
        raise ContractError("non-finite logits")
    if labels.shape != (logits.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ContractError("labels must be a vector of class indices in [0, C)")
    logp = _log_softmax(logits)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def weight_penalty(model: MlpModel, scope: str) -> float:
    """Sum of squared norms that weight decay acts on (without the lambda/2)."""
    if scope not in WD_SCOPES:
        raise ContractError(f"unknown wd scope {scope!r}")
    mats = model.weights if scope == "all_layers" else model.weights[-1:]
    total = sum(float(np.sum(w * w)) for w in mats)
    if model.bn_gamma is not None:
        total += float(np.sum(model.bn_gamma * model.bn_gamma))
    return total


def regularized_loss(ce, model: MlpModel, lam, scope="last_layer_and_gamma") -> float:
    if lam < 0:
        raise ContractError("weight decay must be non-negative")
    if lam == 0:
        return float(ce)
    return float(ce) + 0.5 * lam * weight_penalty(model, scope)


def backward(trace: Trace, labels, wd_lambda=0.0, wd_scope="last_layer_and_gamma") -> dict:
    """Gradients of the regularized mean CE loss for every parameter.

    BN is differentiated through its batch mean and variance.
    """
    model = trace.model
    cfg = model.config
    labels = np.asarray(labels)
    B = trace.logits.shape[0]
    probs = np.exp(_log_softmax(trace.logits))
    dlogits = probs
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B

    grads = {}
    L = cfg.n_layers
    grads[f"W{L - 1}"] = dlogits.T @ trace.inputs[-1]
    da = dlogits @ model.weights[-1]
    if cfg.use_bn:
        grads["gamma"] = np.sum(da * trace.xhat, axis=0)
        dxhat = da * model.bn_gamma
        xhat = trace.xhat
        da = (dxhat - dxhat.mean(axis=0) - xhat * np.mean(dxhat * xhat, axis=0)) / trace.bn_std
    for l in range(L - 2, -1, -1):
        dz = da * (trace.pre_acts[l] > 0)
        grads[f"W{l}"] = dz.T @ trace.inputs[l]
        if model.hidden_biases is not None:
            grads[f"b{l}"] = dz.sum(axis=0)
        if l > 0:
            da = dz @ model.weights[l]

    if wd_lambda:
        decayed = range(L) if wd_scope == "all_layers" else [L - 1]
        for l in decayed:
            grads[f"W{l}"] = grads[f"W{l}"] + wd_lambda * model.weights[l]
        if "gamma" in grads:
            grads["gamma"] = grads["gamma"] + wd_lambda * model.bn_gamma
    return grads


def objective(model: MlpModel, X, labels, wd_lambda=0.0, wd_scope="last_layer_and_gamma") -> float:
    logits, _, _ = forward(model, X)
    return regularized_loss(ce_loss(logits, labels), model, wd_lambda, wd_scope)


def grad_check(model: MlpModel, X, labels, step=1e-5, wd_lambda=0.0, wd_scope="last_layer_and_gamma") -> float:
    """Max relative error between ``backward`` and central differences."""
    if model.config.np_dtype is not np.float64:
        raise ContractError("grad_check needs a 64-bit model")
    _, _, trace = forward(model, X)
    analytic = backward(trace, labels, wd_lambda, wd_scope)
    worst = 0.0
    for name, param in model.parameters().items():
        g = analytic[name]
        flat = param.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = objective(model, X, labels, wd_lambda, wd_scope)
            flat[i] = orig - step
            down = objective(model, X, labels, wd_lambda, wd_scope)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
        diff = np.abs(numeric - g.reshape(-1))
        # absolute floor keeps near-zero entries from blowing up the ratio
        scale = np.maximum(np.abs(numeric) + np.abs(g.reshape(-1)), 1e-6)
        worst = max(worst, float(np.max(diff / scale, initial=0.0)))
    return worst


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 128
    wd_lambda: float = 0.0
    wd_scope: str = "all_layers"
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    freeze_gamma_to: Optional[float] = None
    metric_every: int = 5
    centering: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size <= 0 or self.metric_every <= 0:
            raise ContractError("lr, batch_size, metric_every must be positive and epochs >= 0")
        if self.wd_lambda < 0:
            raise ContractError("wd_lambda must be >= 0")
        if self.wd_scope not in WD_SCOPES:
            raise ContractError(f"wd_scope must be one of {WD_SCOPES}")
        if self.freeze_gamma_to is not None and self.freeze_gamma_to <= 0:
            raise ContractError("freeze_gamma_to must be positive")

    def decay_epochs(self):
        E = self.epochs
        return [math.ceil(k * E / 4) for k in (1, 2, 3)]

    def lr_at(self, epoch):
        """Learning rate used during (0-based) ``epoch``."""
        n = sum(1 for b in self.decay_epochs() if epoch >= b)
        return self.lr * self.lr_decay**n


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    reg_loss: float
    accuracy: float
    report: metrics.NcReport
    alpha: float
    beta: float
    gamma_norm: Optional[float] = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def epochs(self):
        return [r.epoch for r in self.records]


def evaluate(model: MlpModel, X, y, wd_lambda=0.0, wd_scope="all_layers", centering=True, epoch=0) -> EpochRecord:
    """Full-batch metrics: one BN pass over the whole set."""
    logits, feats, _ = forward(model, X, mode="full_batch_eval")
    loss = ce_loss(logits, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
    fs = metrics.FeatureSet.from_labels(feats, y, model.config.n_classes)
    report = metrics.summarize(fs, model.last_weight, centering=centering)
    gnorm = None if model.bn_gamma is None else float(np.linalg.norm(model.bn_gamma))
    return EpochRecord(
        epoch=epoch,
        loss=loss,
        reg_loss=regularized_loss(loss, model, wd_lambda, wd_scope),
        accuracy=float(np.mean(np.argmax(logits, axis=1) == y)),
        report=report,
        alpha=report.alpha,
        beta=report.beta,
        gamma_norm=gnorm,
    )


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out.pop()
    return out


def train(model: MlpModel, X, y, config: TrainConfig) -> TrainHistory:
    """Mini-batch Adam with coupled L2 weight decay; mutates ``model``.

    Records full-batch metrics at epoch 0, every ``metric_every`` epochs and
    at the last epoch.
    """
    X = np.asarray(X, dtype=model.config.np_dtype)
    y = np.asarray(y)
    if config.freeze_gamma_to is not None:
        if model.bn_gamma is None:
            raise ContractError("freeze_gamma_to needs a BN model")
        model.bn_gamma[:] = config.freeze_gamma_to
        model.gamma_frozen = True

    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    params = model.parameters()
    names = model.trainable_names()
    m1 = {k: np.zeros_like(params[k]) for k in names}
    m2 = {k: np.zeros_like(params[k]) for k in names}
    b1, b2 = config.beta1, config.beta2
    step = 0

    def record(epoch):
        return evaluate(model, X, y, config.wd_lambda, config.wd_scope, config.centering, epoch)

    history = TrainHistory([record(0)])
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for idx in _batches(len(y), config.batch_size, shuffle_rng):
            logits, _, trace = forward(model, X[idx])
            if not np.all(np.isfinite(logits)):
                raise DivergenceError(f"non-finite logits during epoch {epoch + 1}", epoch + 1)
            grads = backward(trace, y[idx], config.wd_lambda, config.wd_scope)
            step += 1
            c1 = 1 - b1**step
            c2 = 1 - b2**step
            for k in names:
                g = grads[k]
                m1[k] *= b1
                m1[k] += (1 - b1) * g
                m2[k] *= b2
                m2[k] += (1 - b2) * g * g
                params[k] -= lr * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + config.adam_eps)
        done = epoch + 1
        if done % config.metric_every == 0 or done == config.epochs:
            history.records.append(record(done))
    return history


# --------------------------------------------------------------------------
# checkpoints


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.rng_seed,
        "gamma_frozen": model.gamma_frozen,
        "weights": [w.astype(np.float64).tolist() for w in model.weights],
        "hidden_biases": None if model.hidden_biases is None else [b.astype(np.float64).tolist() for b in model.hidden_biases],
        "bn_gamma": None if model.bn_gamma is None else model.bn_gamma.astype(np.float64).tolist(),
    }


def model_from_dict(d: dict) -> MlpModel:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ContractError("not a collapse-lab model checkpoint (or unsupported version)")
    cfg = MlpConfig(**d["config"])
    dt = cfg.np_dtype
    weights = [np.array(w, dtype=dt).reshape(o, i) for w, i, o in zip(d["weights"], cfg.layer_widths[:-1], cfg.layer_widths[1:])]
    biases = None if d["hidden_biases"] is None else [np.array(b, dtype=dt) for b in d["hidden_biases"]]
    gamma = None if d["bn_gamma"] is None else np.array(d["bn_gamma"], dtype=dt)
    return MlpModel(cfg, weights, biases, gamma, int(d["seed"]), bool(d.get("gamma_frozen", False)))


def save_model(model: MlpModel, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> MlpModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
