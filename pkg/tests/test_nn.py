import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collapse_lab import data, nn
from collapse_lab.errors import ContractError, DegenerateBatchError, DivergenceError


def _model(widths, bn=False, biases=False, seed=0, var_eps=1e-5):
    return nn.MlpModel.init(nn.MlpConfig(widths, use_bn=bn, use_biases=biases, var_eps=var_eps), seed)


def _quad_mean_norm(F):
    return math.sqrt(np.mean(np.sum(F * F, axis=1)))


# --- batch norm ----------------------------------------------------------


def test_bn_two_point_column():
    out, stats = nn.bn_forward(np.array([[1.0], [3.0]]), np.array([2.0]))
    npt.assert_allclose(out[:, 0], [-2.0, 2.0])
    npt.assert_allclose(stats.mu, [2.0])
    npt.assert_allclose(stats.sigma, [1.0])
    assert _quad_mean_norm(out) == pytest.approx(2.0, abs=1e-15)


def test_bn_identical_rows_is_degenerate():
    X = np.tile([1.0, 2.0, 3.0], (5, 1))
    with pytest.raises(DegenerateBatchError):
        nn.bn_forward(X, np.ones(3))


def test_bn_random_batch_norm_identity():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((7, 5))
    gamma = rng.standard_normal(5)
    out, _ = nn.bn_forward(X, gamma)
    assert abs(_quad_mean_norm(out) - np.linalg.norm(gamma)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    batch=st.integers(2, 64),
    d=st.integers(1, 16),
    seed=st.integers(0, 2**31 - 1),
)
def test_bn_norm_identity_property(batch, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((batch, d)) * rng.uniform(0.1, 10, d) + rng.normal(0, 5, d)
    gamma = rng.normal(0, 2, d)
    out, _ = nn.bn_forward(X, gamma)
    assert abs(_quad_mean_norm(out) - np.linalg.norm(gamma)) <= 1e-9 * max(1.0, np.linalg.norm(gamma))


# --- forward / loss ------------------------------------------------------


def test_identity_model_forward():
    model = _model([2, 2])
    model.weights[0] = np.eye(2)
    logits, feats, _ = nn.forward(model, np.array([[1.0, -2.0]]))
    npt.assert_array_equal(logits, [[1.0, -2.0]])
    npt.assert_array_equal(feats, [[1.0, -2.0]])


def test_zero_input_gives_zero_output():
    model = _model([4, 6, 5, 3])
    logits, feats, _ = nn.forward(model, np.zeros((3, 4)))
    assert not logits.any() and not feats.any()


def test_forward_shape_mismatch():
    with pytest.raises(ContractError):
        nn.forward(_model([4, 6, 3]), np.zeros((2, 5)))


def test_full_batch_bn_features_match_gamma_norm():
    rng = np.random.default_rng(1)
    model = _model([5, 8, 6, 3], bn=True, var_eps=0.0)
    model.bn_gamma[:] = rng.uniform(0.5, 2, 6)
    X = rng.standard_normal((200, 5))
    _, feats, _ = nn.forward(model, X, mode="full_batch_eval")
    assert abs(_quad_mean_norm(feats) - np.linalg.norm(model.bn_gamma)) < 1e-12


def test_ce_uniform_logits():
    assert nn.ce_loss(np.zeros((5, 4)), np.array([0, 1, 2, 3, 1])) == pytest.approx(math.log(4), abs=1e-15)


def test_ce_saturated_margin():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 1000.0
    assert nn.ce_loss(logits, np.array([1, 2])) <= 1e-12


def test_ce_matches_naive_softmax():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((3, 3))
    y = np.array([2, 0, 1])
    p = np.exp(Z) / np.exp(Z).sum(axis=1, keepdims=True)
    naive = -np.mean(np.log(p[np.arange(3), y]))
    assert nn.ce_loss(Z, y) == pytest.approx(naive, abs=1e-12)


def test_ce_rejects_non_finite():
    with pytest.raises(ContractError):
        nn.ce_loss(np.array([[np.inf, 0.0]]), np.array([0]))


def test_regularized_loss_arithmetic():
    model = _model([4, 2, 3], bn=True)
    model.bn_gamma[:] = [math.sqrt(2), math.sqrt(2)]  # |gamma|^2 = 4
    model.weights[-1] = np.zeros((3, 2))
    model.weights[-1][0, 0] = 3.0  # |W|_F^2 = 9
    assert nn.regularized_loss(1.0, model, 0.1, "last_layer_and_gamma") == pytest.approx(1.65, abs=1e-12)
    assert nn.regularized_loss(1.0, model, 0.0, "all_layers") == 1.0


def test_all_layer_scope_adds_earlier_weights():
    model = _model([4, 6, 5, 3], bn=True, seed=2)
    lam = 0.3
    last = nn.regularized_loss(0.7, model, lam, "last_layer_and_gamma")
    full = nn.regularized_loss(0.7, model, lam, "all_layers")
    earlier = sum(float(np.sum(w * w)) for w in model.weights[:-1])
    assert full == pytest.approx(last + lam / 2 * earlier, rel=1e-14)


# --- gradients -----------------------------------------------------------


def _randomize(model, rng):
    if model.hidden_biases is not None:
        for b in model.hidden_biases:
            b[:] = rng.normal(0, 0.5, b.shape)
    if model.bn_gamma is not None:
        model.bn_gamma[:] = rng.normal(1, 0.5, model.bn_gamma.shape)


@pytest.mark.parametrize("bn", [False, True])
@pytest.mark.parametrize("biases", [False, True])
def test_grad_check_4_6_5_3(bn, biases):
    rng = np.random.default_rng(11)
    model = _model([4, 6, 5, 3], bn=bn, biases=biases, seed=5)
    _randomize(model, rng)
    X = rng.standard_normal((9, 4))
    y = rng.integers(0, 3, 9)
    for scope in nn.WD_SCOPES:
        assert nn.grad_check(model, X, y, 1e-5, wd_lambda=0.05, wd_scope=scope) < 1e-4


def test_grad_of_decay_term_is_lambda_w():
    rng = np.random.default_rng(4)
    model = _model([3, 4, 2], bn=True)
    X = rng.standard_normal((6, 3))
    y = rng.integers(0, 2, 6)
    _, _, trace = nn.forward(model, X)
    plain = nn.backward(trace, y, 0.0)
    decayed = nn.backward(trace, y, 0.2, "all_layers")
    for l, W in enumerate(model.weights):
        npt.assert_allclose(decayed[f"W{l}"] - plain[f"W{l}"], 0.2 * W, atol=1e-15)
    npt.assert_allclose(decayed["gamma"] - plain["gamma"], 0.2 * model.bn_gamma, atol=1e-15)


def test_zero_gradient_at_saturated_point():
    model = _model([2, 2])
    model.weights[0] = np.eye(2) * 1e4
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    _, _, trace = nn.forward(model, X)
    grads = nn.backward(trace, np.array([0, 1]))
    assert np.linalg.norm(grads["W0"]) < 1e-8


def test_identity_model_grad_check_is_exact():
    model = _model([3, 3])
    model.weights[0] = np.eye(3)
    X = np.random.default_rng(0).standard_normal((4, 3))
    assert nn.grad_check(model, X, np.array([0, 1, 2, 0])) < 1e-8


# --- training ------------------------------------------------------------


def _small_data(seed=0):
    ds = data.gen_conic_hull(6, 4, 40, seed)
    return ds.X, ds.y


def test_zero_epochs_leaves_model_untouched():
    X, y = _small_data()
    model = _model([6, 8, 8, 4], bn=True)
    before = model.copy()
    hist = nn.train(model, X, y, nn.TrainConfig(epochs=0))
    assert hist.epochs() == [0]
    for a, b in zip(model.weights, before.weights):
        npt.assert_array_equal(a, b)


def test_training_is_bit_reproducible():
    X, y = _small_data()
    cfg = nn.TrainConfig(epochs=6, batch_size=32, wd_lambda=5e-3, seed=3, metric_every=2)
    runs = []
    for _ in range(2):
        model = _model([6, 8, 8, 4], bn=True, seed=3)
        hist = nn.train(model, X, y, cfg)
        runs.append(([r.loss for r in hist.records], [r.report.min_intra for r in hist.records], model))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    for a, b in zip(runs[0][2].weights, runs[1][2].weights):
        npt.assert_array_equal(a, b)


def test_training_reduces_loss_and_records_schedule():
    X, y = _small_data(1)
    model = _model([6, 16, 16, 4], bn=True, seed=1)
    hist = nn.train(model, X, y, nn.TrainConfig(epochs=12, batch_size=32, lr=1e-2, metric_every=5))
    assert hist.epochs() == [0, 5, 10, 12]
    assert hist.final.loss < hist.records[0].loss


def test_frozen_gamma_never_moves():
    X, y = _small_data()
    model = _model([6, 8, 16, 4], bn=True)
    nn.train(model, X, y, nn.TrainConfig(epochs=3, batch_size=32, wd_lambda=5e-3, freeze_gamma_to=1.0))
    assert np.max(np.abs(model.bn_gamma - 1.0)) == 0.0
    assert np.linalg.norm(model.bn_gamma) == pytest.approx(4.0)


def test_divergence_reports_epoch():
    X, y = _small_data()
    model = _model([6, 8, 4])
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        nn.train(model, X, y, nn.TrainConfig(epochs=2, lr=1e200))
    assert info.value.epoch in (1, 2)


def test_lr_schedule_quarters():
    cfg = nn.TrainConfig(lr=1e-3, epochs=300)
    assert cfg.decay_epochs() == [75, 150, 225]
    assert cfg.lr_at(74) == 1e-3
    assert cfg.lr_at(75) == pytest.approx(1e-4)
    assert cfg.lr_at(299) == pytest.approx(1e-6)


def test_checkpoint_round_trip(tmp_path):
    model = _model([4, 6, 5, 3], bn=True, biases=True, seed=9)
    path = tmp_path / "m.json"
    nn.save_model(model, path)
    back = nn.load_model(path)
    X = np.random.default_rng(0).standard_normal((5, 4))
    npt.assert_array_equal(nn.forward(model, X)[0], nn.forward(back, X)[0])
