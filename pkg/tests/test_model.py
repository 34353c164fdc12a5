import copy
import math
import warnings

import numpy as np
import pytest

from oracles import gradient_check, random_tiny_problem
from scatarousal import model as M
from scatarousal.errors import (
    ConfigError,
    DegenerateBatchError,
    DivergenceError,
    ShapeError,
    StatisticsError,
    TruncatedDataError,
)
from scatarousal.model import (
    EarlyStopping,
    ModelConfig,
    TrainConfig,
    batch_loss_and_grads,
    bn_forward,
    class_weight_from_prevalence,
    forward,
    init_params,
    load_model,
    loss_and_grads,
    lstm_forward,
    param_names,
    read_history,
    rmsprop_step,
    save_model,
    train,
    weighted_cross_entropy,
    write_history,
    zero_params,
)

W_DEFAULT = [0.0, 1.0, 14.0]


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# --- LSTM layer ------------------------------------------------------------

def test_lstm_zero_weights(rng):
    H, d = 4, 3
    h = lstm_forward(np.zeros((4 * H, d)), np.zeros((4 * H, H)), np.zeros(4 * H),
                     rng.standard_normal((7, d)))
    assert h.shape == (7, 4) and not h.any()


def test_lstm_empty_sequence():
    h = lstm_forward(np.ones((8, 3)), np.ones((8, 2)), np.ones(8), np.zeros((0, 3)))
    assert h.shape == (0, 2)


def test_lstm_scalar_oracle():
    W = np.array([[0.3], [-0.7], [1.1], [0.5]])
    b = np.array([0.1, 0.2, -0.3, 0.4])
    U = np.array([[0.9], [-0.4], [0.25], [0.6]])
    x = 0.8
    i = _sig(0.3 * x + 0.1)
    f = _sig(-0.7 * x + 0.2)
    g = math.tanh(1.1 * x - 0.3)
    o = _sig(0.5 * x + 0.4)
    c = f * 0.0 + i * g
    h = o * math.tanh(c)
    out = lstm_forward(W, U, b, np.array([[x]]))
    assert abs(out[0, 0] - h) < 1e-12


def test_lstm_two_step_oracle():
    W = np.array([[0.3], [-0.7], [1.1], [0.5]])
    b = np.array([0.1, 0.2, -0.3, 0.4])
    U = np.array([[0.9], [-0.4], [0.25], [0.6]])
    xs = [0.8, -1.3]
    h = c = 0.0
    expected = []
    for x in xs:
        a = [W[k, 0] * x + U[k, 0] * h + b[k] for k in range(4)]
        c = _sig(a[1]) * c + _sig(a[0]) * math.tanh(a[2])
        h = _sig(a[3]) * math.tanh(c)
        expected.append(h)
    out = lstm_forward(W, U, b, np.array(xs)[:, None])
    np.testing.assert_allclose(out[:, 0], expected, rtol=0, atol=1e-12)


def test_lstm_shape_error():
    with pytest.raises(ShapeError):
        lstm_forward(np.ones((8, 3)), np.ones((8, 2)), np.ones(8), np.zeros((4, 2)))


# --- batch norm ------------------------------------------------------------

def test_bn_infer_identity(rng):
    x = rng.standard_normal((6, 3))
    y, _, _ = bn_forward(x, np.ones(3), np.zeros(3), "infer", np.zeros(3), np.ones(3), eps=1e-5)
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), rtol=1e-15)


def test_bn_train_constant_column():
    x = np.full((5, 1), 3.7)
    y, _, _ = bn_forward(x, np.array([2.0]), np.array([0.25]), "train")
    np.testing.assert_array_equal(y, 0.25)


def test_bn_train_two_values():
    y, rm, rv = bn_forward(np.array([[-1.0], [1.0]]), np.array([2.0]), np.array([1.0]), "train",
                           eps=1e-5, momentum=0.9)
    s = 2 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(y[:, 0], [1 - s, 1 + s], rtol=1e-15)
    assert rm[0] == 0.0 and rv[0] == pytest.approx(0.9 + 0.1 * 1.0)


def test_bn_mask_excludes_rows():
    x = np.array([[-1.0], [1.0], [100.0]])
    y, _, _ = bn_forward(x, np.ones(1), np.zeros(1), "train", mask=[True, True, False])
    s = 1 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(y[:2, 0], [-s, s], rtol=1e-15)


def test_bn_single_frame():
    with pytest.raises(StatisticsError):
        bn_forward(np.ones((1, 2)), np.ones(2), np.zeros(2), "train")


# --- forward ---------------------------------------------------------------

def test_forward_rows_sum_to_one(rng):
    cfg = ModelConfig(input_dim=5, hidden_units=6, seed=3)
    p = forward(init_params(cfg), cfg, 10 * rng.standard_normal((40, 5)))
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-9
    assert (p > 0).all() and (p < 1).all()


def test_forward_zero_model_uniform(rng):
    cfg = ModelConfig(input_dim=4, hidden_units=3)
    p = forward(zero_params(cfg), cfg, rng.standard_normal((9, 4)))
    np.testing.assert_allclose(p, 1 / 3, rtol=1e-15)


def test_forward_deterministic(rng):
    cfg = ModelConfig(input_dim=4, hidden_units=5, seed=9)
    X = rng.standard_normal((12, 4))
    a = forward(init_params(cfg), cfg, X, mode="train")
    b = forward(init_params(cfg), cfg, X, mode="train")
    assert a.tobytes() == b.tobytes()


def test_forward_input_dim_mismatch():
    cfg = ModelConfig(input_dim=4, hidden_units=3)
    with pytest.raises(ShapeError):
        forward(zero_params(cfg), cfg, np.zeros((3, 5)))


def test_init_scheme():
    cfg = ModelConfig(input_dim=9, hidden_units=4, seed=0)
    p = init_params(cfg)
    assert np.abs(p["lstm0.W"]).max() <= 1 / 3
    assert np.abs(p["lstm1.U"]).max() <= 1 / 2
    np.testing.assert_array_equal(p["lstm0.b"][4:8], 1.0)
    np.testing.assert_array_equal(p["lstm0.b"][:4], 0.0)
    assert list(p) == param_names(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_units=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(class_weights=[0, -1, 1]).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1})


# --- loss ------------------------------------------------------------------

def test_ce_perfect_frame():
    loss, per = weighted_cross_entropy(np.array([[0, 0, 1.0]]), [2], W_DEFAULT)
    assert loss == 0.0 and per[0] == 0.0


def test_ce_pad_contributes_zero():
    probs = np.array([[0.0, 0.0, 1.0], [0.2, 0.3, 0.5]])
    loss, per = weighted_cross_entropy(probs, [0, 1], W_DEFAULT)
    assert per[0] == 0.0
    assert loss == pytest.approx(-math.log(0.3), abs=1e-15)


def test_ce_ln2():
    loss, _ = weighted_cross_entropy(np.array([[0.25, 0.25, 0.5]]), [2], W_DEFAULT)
    assert abs(loss - math.log(2)) <= 1e-12


def test_ce_all_pad():
    with pytest.raises(DegenerateBatchError):
        weighted_cross_entropy(np.full((3, 3), 1 / 3), [0, 0, 0], W_DEFAULT)


def test_all_pad_grads_zero(rng):
    cfg, params, X, _ = random_tiny_problem(4)
    loss, grads, _ = loss_and_grads(params, cfg, X, np.zeros(len(X), int), W_DEFAULT)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


# --- gradients -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_gradient_check(seed):
    cfg, params, X, y = random_tiny_problem(seed)
    assert gradient_check(cfg, params, X, y) < 1e-4


def test_gradient_check_with_pad_frames():
    cfg, params, X, y = random_tiny_problem(21, frames=7)
    y[-2:] = 0
    assert gradient_check(cfg, params, X, y) < 1e-4


def test_duplicated_batch_same_gradient(rng):
    cfg, params, X, y = random_tiny_problem(7, frames=9)
    l1, g1, _ = batch_loss_and_grads(params, cfg, [(X, y)], W_DEFAULT)
    l2, g2, _ = batch_loss_and_grads(params, cfg, [(X, y), (X, y)], W_DEFAULT)
    assert abs(l1 - l2) <= 1e-12
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=0, atol=1e-12)


def test_pad_append_leaves_loss_and_grads(rng):
    cfg, params, X, y = random_tiny_problem(8, frames=6)
    l1, g1, _ = loss_and_grads(params, cfg, X, y, W_DEFAULT)
    X2 = np.vstack([X, 50 * rng.standard_normal((4, X.shape[1]))])
    y2 = np.r_[y, [0, 0, 0, 0]]
    l2, g2, _ = loss_and_grads(params, cfg, X2, y2, W_DEFAULT)
    assert abs(l1 - l2) < 1e-9
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=0, atol=1e-12)


# --- optimizer -------------------------------------------------------------

def test_rmsprop_zero_gradient():
    p = {"a": np.array([1.0, -2.0])}
    s = {"a": np.array([0.5, 0.2])}
    p2, s2 = rmsprop_step(p, {"a": np.zeros(2)}, s, lr=0.1, rho=0.9)
    np.testing.assert_array_equal(p2["a"], p["a"])
    np.testing.assert_allclose(s2["a"], 0.9 * s["a"], rtol=1e-15)


def test_rmsprop_scalar_examples():
    p, s = {"t": np.array(0.0)}, {}
    g = {"t": np.array(1.0)}
    p, s = rmsprop_step(p, g, s, lr=0.1, rho=0.9, eps=1e-8)
    assert float(s["t"]) == pytest.approx(0.1, abs=1e-15)
    assert float(p["t"]) == pytest.approx(-0.1 / math.sqrt(0.1 + 1e-8), abs=1e-15)
    assert float(p["t"]) == pytest.approx(-0.31623, abs=1e-5)
    before = float(p["t"])
    p, s = rmsprop_step(p, g, s, lr=0.1, rho=0.9, eps=1e-8)
    assert float(s["t"]) == pytest.approx(0.19, abs=1e-15)
    assert float(p["t"]) - before == pytest.approx(-0.1 / math.sqrt(0.19 + 1e-8), abs=1e-15)
    assert float(p["t"]) - before == pytest.approx(-0.22942, abs=1e-5)


def test_rmsprop_divergence_names_parameter():
    with pytest.raises(DivergenceError, match="lstm1.U"):
        rmsprop_step({"lstm1.U": np.zeros(2)}, {"lstm1.U": np.array([0.0, np.inf])}, {})


# --- early stopping and training ------------------------------------------

def test_early_stopping_rule():
    es = EarlyStopping(1)
    assert es.update(1, 1.0) and not es.should_stop
    assert not es.update(2, 2.0) and es.should_stop
    assert es.best_epoch == 1


def _toy(seed, n_seq=8, frames=20, dim=2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_seq):
        y = rng.integers(1, 3, frames)
        y[:2] = [1, 2]
        X = rng.standard_normal((frames, dim)) + 3.0 * (y == 2)[:, None]
        out.append((X, y))
    return out


def test_train_stops_on_increasing_val_loss(monkeypatch):
    seen = []
    losses = iter([5.0, 1.0, 2.0, 3.0, 4.0])

    def fake_pooled(params, cfg, dataset, weights):
        seen.append(copy.deepcopy(params))
        return next(losses)

    monkeypatch.setattr(M, "pooled_loss", fake_pooled)
    cfg = ModelConfig(input_dim=2, hidden_units=3, seed=0)
    tcfg = TrainConfig(learning_rate=1e-2, patience=1, max_epochs=10, seed=0)
    res = train(cfg, _toy(0, 3), _toy(1, 2), tcfg)
    assert len(res.history) == 2 and res.best_epoch == 1 and res.stopped_early
    for k in res.params:
        np.testing.assert_array_equal(res.params[k], seen[1][k])


def test_train_returns_min_val_epoch():
    cfg = ModelConfig(input_dim=2, hidden_units=4, seed=1)
    tcfg = TrainConfig(learning_rate=0.05, patience=5, max_epochs=25, class_weights=[0, 1, 1],
                       seed=2)
    res = train(cfg, _toy(3), _toy(4, 3), tcfg)
    vals = [v for _, _, v in res.history]
    assert res.best_val_loss == min(vals)
    assert res.best_epoch == vals.index(min(vals)) + 1
    assert M.pooled_loss(res.params, cfg, _toy(4, 3), [0, 1, 1]) == res.best_val_loss


def test_train_toy_task_converges():
    cfg = ModelConfig(input_dim=2, hidden_units=4, seed=5)
    tcfg = TrainConfig(learning_rate=1e-2, patience=200, max_epochs=200, class_weights=[0, 1, 1],
                       seed=6)
    res = train(cfg, _toy(10), _toy(11, 4), tcfg)
    assert res.best_val_loss < 0.1 * res.initial_val_loss


def test_train_deterministic():
    cfg = ModelConfig(input_dim=2, hidden_units=3, seed=5)
    tcfg = TrainConfig(learning_rate=1e-2, patience=3, max_epochs=6, batch_size=2, seed=6)
    a = train(cfg, _toy(10), _toy(11, 3), tcfg)
    b = train(cfg, _toy(10), _toy(11, 3), tcfg)
    assert a.history == b.history
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_train_all_pad_is_error():
    from scatarousal.errors import TrainingError
    cfg = ModelConfig(input_dim=2, hidden_units=3)
    bad = [(np.zeros((4, 2)), np.zeros(4, int))]
    with pytest.raises(TrainingError):
        train(cfg, bad, _toy(0, 1), TrainConfig(max_epochs=1))


# --- class weights ---------------------------------------------------------

@pytest.mark.parametrize("n_non,n_ar,expected", [(14, 1, 14.0), (5, 5, 1.0), (7, 2, 4.0),
                                                 (1, 50, 1.0), (5000, 1, 1000.0)])
def test_class_weight_examples(n_non, n_ar, expected):
    y = np.r_[np.ones(n_non, int), np.full(n_ar, 2), np.zeros(9, int)]
    assert class_weight_from_prevalence(y) == [0.0, 1.0, expected]


def test_class_weight_no_arousal_warns():
    with pytest.warns(RuntimeWarning):
        assert class_weight_from_prevalence([np.ones(5, int)])[2] == 1000.0


def test_class_weight_all_pad():
    with pytest.raises(DegenerateBatchError):
        class_weight_from_prevalence(np.zeros(4, int))


# --- containers ------------------------------------------------------------

def test_model_roundtrip(tmp_path):
    cfg = ModelConfig(input_dim=6, hidden_units=5, seed=4)
    params = init_params(cfg)
    save_model(tmp_path, params, cfg, {"epoch": 3, "val_loss": 0.5, "seed": 4})
    back, cfg2, header = load_model(tmp_path)
    assert cfg2 == cfg and header["epoch"] == 3
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()


def test_model_truncated(tmp_path):
    cfg = ModelConfig(input_dim=2, hidden_units=2)
    save_model(tmp_path, zero_params(cfg), cfg)
    dat = tmp_path / "model.dat"
    dat.write_bytes(dat.read_bytes()[:-8])
    with pytest.raises(TruncatedDataError):
        load_model(tmp_path)


def test_history_roundtrip(tmp_path):
    hist = [(1, 0.5, 0.75), (2, 1 / 3, 0.1 + 0.2)]
    write_history(tmp_path / "h.csv", hist)
    assert read_history(tmp_path / "h.csv") == hist
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss"
