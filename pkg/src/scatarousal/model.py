"""Stacked-LSTM frame classifier with batch norm between layers.

Architecture: LSTM -> BN -> LSTM -> BN -> LSTM -> dense -> softmax, applied
to one sequence at a time. Batch-norm statistics in training mode are taken
over the non-PAD frames of the sequence. All arithmetic is float64.
"""
import copy
import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._binio import read_array, write_array
from .errors import (
    ConfigError,
    DegenerateBatchError,
    DivergenceError,
    MalformedHeaderError,
    ShapeError,
    StatisticsError,
    TrainingError,
)
from .kernels import lstm_recurrence, lstm_recurrence_backward

FORMAT_VERSION = 1
PAD, NON_AROUSAL, AROUSAL = 0, 1, 2


def _from_dict(cls, d, section):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ModelConfig:
    input_dim: int = 468
    hidden_units: int = 100
    n_layers: int = 3
    n_classes: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    seed: int = 0

    def validate(self):
        if self.input_dim < 1 or self.hidden_units < 1 or self.n_layers < 1:
            raise ConfigError("input_dim, hidden_units and n_layers must be >= 1")
        if self.n_classes != 3:
            raise ConfigError("n_classes is fixed to 3 (PAD, Non-arousal, Arousal)")
        return self

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, "model")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    class_weights: list = field(default_factory=lambda: [0.0, 1.0, 14.0])
    auto_class_weight: bool = False
    patience: int = 50
    max_epochs: int = 300
    batch_size: int = 1
    max_length: int = None
    seed: int = 0

    def validate(self):
        if len(self.class_weights) != 3 or min(self.class_weights) < 0:
            raise ConfigError("class_weights must be three non-negative numbers")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must be >= 1")
        if self.max_length is not None and self.max_length < 1:
            raise ConfigError("max_length must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, "train")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# parameters

def param_names(cfg):
    """Fixed parameter order used for serialization."""
    names = []
    for l in range(cfg.n_layers):
        names += [f"lstm{l}.W", f"lstm{l}.U", f"lstm{l}.b"]
        if l < cfg.n_layers - 1:
            names += [f"bn{l}.gamma", f"bn{l}.beta", f"bn{l}.running_mean", f"bn{l}.running_var"]
    return names + ["dense.W", "dense.b"]


def is_trainable(name):
    return "running_" not in name


def param_shapes(cfg):
    H, shapes = cfg.hidden_units, {}
    for l in range(cfg.n_layers):
        d_in = cfg.input_dim if l == 0 else H
        shapes[f"lstm{l}.W"] = (4 * H, d_in)
        shapes[f"lstm{l}.U"] = (4 * H, H)
        shapes[f"lstm{l}.b"] = (4 * H,)
        if l < cfg.n_layers - 1:
            for s in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"bn{l}.{s}"] = (H,)
    shapes["dense.W"] = (cfg.n_classes, H)
    shapes["dense.b"] = (cfg.n_classes,)
    return {n: shapes[n] for n in param_names(cfg)}


def init_params(cfg):
    """Uniform(-k, k) with k = 1/sqrt(fan_in); forget-gate bias 1, BN identity."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    H, params = cfg.hidden_units, {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".W", ".U")):
            k = 1.0 / math.sqrt(shape[1])
            params[name] = rng.uniform(-k, k, size=shape)
        elif name.startswith("lstm") and name.endswith(".b"):
            b = np.zeros(shape)
            b[H:2 * H] = 1.0
            params[name] = b
        elif name.endswith(("gamma", "running_var")):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zero_params(cfg):
    return {n: np.zeros(s) for n, s in param_shapes(cfg).items()}


# --------------------------------------------------------------------------
# forward pieces

def lstm_forward(W, U, b, seq):
    """Hidden states (frames x H) of one LSTM layer from zero initial state."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != W.shape[1] or U.shape != (W.shape[0], W.shape[0] // 4):
        raise ShapeError(f"LSTM shape mismatch: seq {seq.shape}, W {W.shape}, U {U.shape}")
    if seq.shape[0] == 0:
        return np.zeros((0, W.shape[0] // 4))
    return lstm_recurrence(seq @ W.T + b, U)[0]


def _bn_stats(x, mask):
    n = int(mask.sum())
    if n < 2:
        raise StatisticsError(f"batch norm in train mode needs >= 2 frames, got {n}")
    m = mask.astype(np.float64)[:, None]
    mean = (m * x).sum(axis=0) / n
    var = (m * (x - mean) ** 2).sum(axis=0) / n
    return mean, var, n


def bn_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None,
               eps=1e-5, momentum=0.9, mask=None):
    """Batch norm over the frame axis.

    Returns ``(y, running_mean, running_var)``; in train mode the running
    statistics are the momentum-updated copies, in infer mode the inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    F = x.shape[1]
    rm = np.zeros(F) if running_mean is None else running_mean
    rv = np.ones(F) if running_var is None else running_var
    if mode == "infer":
        return gamma * (x - rm) / np.sqrt(rv + eps) + beta, rm, rv
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    mask = np.ones(x.shape[0], bool) if mask is None else np.asarray(mask, bool)
    mean, var, _ = _bn_stats(x, mask)
    y = gamma * (x - mean) / np.sqrt(var + eps) + beta
    return y, momentum * rm + (1 - momentum) * mean, momentum * rv + (1 - momentum) * var


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


def _forward(params, cfg, X, mode, mask=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected (frames, {cfg.input_dim}) input, got {X.shape}")
    if mode == "train" and mask is None:
        mask = np.ones(X.shape[0], bool)
    cache = {"inputs": [], "lstm": [], "bn": []}
    batch_stats = {}
    h = X
    for l in range(cfg.n_layers):
        W, U, b = params[f"lstm{l}.W"], params[f"lstm{l}.U"], params[f"lstm{l}.b"]
        cache["inputs"].append(h)
        if h.shape[0]:
            Hs, Cs, G = lstm_recurrence(h @ W.T + b, U)
        else:
            Hs, Cs, G = (np.zeros((0, cfg.hidden_units)),) * 2 + (np.zeros((0, 4 * cfg.hidden_units)),)
        cache["lstm"].append((Hs, Cs, G))
        h = Hs
        if l < cfg.n_layers - 1:
            g, be = params[f"bn{l}.gamma"], params[f"bn{l}.beta"]
            if mode == "train":
                mean, var, n = _bn_stats(h, mask)
                inv = 1.0 / np.sqrt(var + cfg.bn_eps)
                xhat = (h - mean) * inv
                batch_stats[f"bn{l}"] = (mean, var)
                cache["bn"].append((xhat, inv, n))
            else:
                inv = 1.0 / np.sqrt(params[f"bn{l}.running_var"] + cfg.bn_eps)
                xhat = (h - params[f"bn{l}.running_mean"]) * inv
            h = g * xhat + be
    cache["top"] = h
    logits = h @ params["dense.W"].T + params["dense.b"]
    return logits, cache, batch_stats


def forward(params, cfg, X, mode="infer", mask=None):
    """Per-frame class posteriors (frames x 3)."""
    logits, _, _ = _forward(params, cfg, X, mode, mask)
    return softmax(logits)


# --------------------------------------------------------------------------
# loss and gradients

def weighted_cross_entropy(probs, targets, weights):
    """Weight-normalized cross-entropy.

    Returns ``(loss, per_frame)`` where ``per_frame[t] = w[y_t] * -ln p_t[y_t]``
    and zero-weight frames contribute exactly 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)[y]
    total = w.sum()
    if total <= 0:
        raise DegenerateBatchError("all frames carry zero loss weight")
    p = probs[np.arange(y.size), y]
    with np.errstate(divide="ignore"):
        per = np.where(w > 0, w * -np.log(np.where(w > 0, p, 1.0)), 0.0)
    return float(per.sum() / total), per


def _loss_from_logits(logits, y, w):
    lp = log_softmax(logits)
    nll = -lp[np.arange(y.size), y]
    per = np.where(w > 0, w * nll, 0.0)
    return per.sum() / w.sum(), lp


def loss_and_grads(params, cfg, X, targets, weights):
    """Training-mode loss, trainable-parameter gradients and BN batch statistics.

    Zero-weight sequences return loss 0 and all-zero gradients.
    """
    y = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)[y]
    grads = {n: np.zeros_like(params[n]) for n in params if is_trainable(n)}
    if w.sum() <= 0:
        return 0.0, grads, {}
    mask = y != PAD
    logits, cache, batch_stats = _forward(params, cfg, X, "train", mask)
    loss, lp = _loss_from_logits(logits, y, w)

    W_total = w.sum()
    dlogits = np.exp(lp)
    dlogits[np.arange(y.size), y] -= 1.0
    dlogits *= (w / W_total)[:, None]
    top = cache["top"]
    grads["dense.W"] = dlogits.T @ top
    grads["dense.b"] = dlogits.sum(axis=0)
    dh = dlogits @ params["dense.W"]

    m = mask.astype(np.float64)[:, None]
    for l in range(cfg.n_layers - 1, -1, -1):
        if l < cfg.n_layers - 1:
            # dh is w.r.t. the BN output of layer l
            xhat, inv, n = cache["bn"][l]
            gamma = params[f"bn{l}.gamma"]
            grads[f"bn{l}.gamma"] = (dh * xhat).sum(axis=0)
            grads[f"bn{l}.beta"] = dh.sum(axis=0)
            gx = dh * gamma
            dh = inv * (gx - m / n * gx.sum(axis=0) - m / n * xhat * (gx * xhat).sum(axis=0))
        Hs, Cs, G = cache["lstm"][l]
        U = params[f"lstm{l}.U"]
        dZ = lstm_recurrence_backward(np.ascontiguousarray(dh), G, Cs, U)
        x_in = cache["inputs"][l]
        grads[f"lstm{l}.W"] = dZ.T @ x_in
        grads[f"lstm{l}.U"] = dZ[1:].T @ Hs[:-1]
        grads[f"lstm{l}.b"] = dZ.sum(axis=0)
        if l > 0:
            dh = dZ @ params[f"lstm{l}.W"]
    return float(loss), grads, batch_stats


def backward(params, cfg, X, targets, weights):
    """Analytic gradients of the weighted cross-entropy for every trainable parameter."""
    return loss_and_grads(params, cfg, X, targets, weights)[1]


def batch_loss_and_grads(params, cfg, batch, weights):
    """Average of per-sequence normalized gradients, reduced in list order."""
    acc, losses, stats_seq = None, [], []
    for X, y in batch:
        loss, g, stats = loss_and_grads(params, cfg, X, y, weights)
        if not stats:
            continue
        losses.append(loss)
        stats_seq.append(stats)
        if acc is None:
            acc = g
        else:
            for k in acc:
                acc[k] = acc[k] + g[k]
    if acc is None:
        return None, None, []
    n = len(losses)
    return float(np.mean(losses)), {k: v / n for k, v in acc.items()}, stats_seq


def sequence_loss(params, cfg, X, targets, weights, mode="infer"):
    """Loss of one sequence without touching running statistics."""
    y = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)[y]
    if w.sum() <= 0:
        raise DegenerateBatchError("all frames carry zero loss weight")
    logits, _, _ = _forward(params, cfg, X, mode, y != PAD if mode == "train" else None)
    return float(_loss_from_logits(logits, y, w)[0])


def pooled_loss(params, cfg, dataset, weights):
    """Total weighted NLL over all sequences divided by total weight (infer mode)."""
    num = den = 0.0
    for X, y in dataset:
        y = np.asarray(y, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)[y]
        if w.sum() <= 0:
            continue
        logits, _, _ = _forward(params, cfg, X, "infer")
        lp = log_softmax(logits)
        nll = -lp[np.arange(y.size), y]
        num += float(np.where(w > 0, w * nll, 0.0).sum())
        den += float(w.sum())
    if den <= 0:
        raise DegenerateBatchError("dataset has no frames with positive loss weight")
    return num / den


def update_running_stats(params, stats_seq, momentum):
    """Fold per-sequence BN batch statistics into the running averages, in order."""
    for stats in stats_seq:
        for key, (mean, var) in stats.items():
            rm, rv = f"{key}.running_mean", f"{key}.running_var"
            params[rm] = momentum * params[rm] + (1 - momentum) * mean
            params[rv] = momentum * params[rv] + (1 - momentum) * var


# --------------------------------------------------------------------------
# optimizer

def rmsprop_step(params, grads, state, lr=0.1, rho=0.9, eps=1e-8):
    """One RMSprop update; returns ``(new_params, new_state)``.

    ``state`` maps parameter names to squared-gradient averages; missing
    entries start at zero.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    new_params, new_state = dict(params), dict(state)
    for name, g in grads.items():
        v = state.get(name)
        v = (1 - rho) * g * g if v is None else rho * v + (1 - rho) * g * g
        new_state[name] = v
        with np.errstate(over="ignore", invalid="ignore"):
            upd = params[name] - lr * g / np.sqrt(v + eps)
        if not np.all(np.isfinite(upd)):
            raise DivergenceError(f"non-finite value after update of parameter {name}")
        new_params[name] = upd
    return new_params, new_state


# --------------------------------------------------------------------------
# training

class EarlyStopping:
    """Track the best validation loss and signal when patience runs out."""

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch, loss):
        """Record ``loss`` for ``epoch``; returns True if it is a new best."""
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.wait = loss, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self):
        return self.wait >= self.patience


@dataclass
class TrainResult:
    params: dict
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float
    initial_val_loss: float
    stopped_early: bool


def class_weight_from_prevalence(frame_targets):
    """Arousal weight ``round(n_non_arousal / n_arousal)`` clamped to [1, 1000].

    Returns ``[0, 1, w2]``. With no arousal frames the clamp maximum is
    returned and a ``RuntimeWarning`` is issued.
    """
    y = np.concatenate([np.asarray(t).ravel() for t in frame_targets]) \
        if isinstance(frame_targets, (list, tuple)) else np.asarray(frame_targets).ravel()
    n_ar = int((y == AROUSAL).sum())
    n_non = int((y == NON_AROUSAL).sum())
    if n_ar + n_non == 0:
        raise DegenerateBatchError("no non-PAD frames to estimate class prevalence")
    if n_ar == 0:
        warnings.warn("no arousal frames; arousal weight clamped to 1000", RuntimeWarning)
        return [0.0, 1.0, 1000.0]
    w = math.floor(n_non / n_ar + 0.5)
    return [0.0, 1.0, float(min(max(w, 1), 1000))]


def train(model_cfg, train_set, val_set, train_cfg, params=None, log=None):
    """RMSprop training with early stopping on validation loss.

    ``train_set`` / ``val_set`` are lists of ``(X, frame_targets)`` pairs.
    The returned parameters are those of the lowest validation loss epoch.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not train_set or not val_set:
        raise TrainingError("training and validation sets must be non-empty")
    weights = np.asarray(train_cfg.class_weights, dtype=np.float64)
    if not any((weights[np.asarray(y, dtype=np.int64)] > 0).any() for _, y in train_set):
        raise TrainingError("training set has no frames with positive loss weight")
    if train_cfg.max_length is not None:
        for X, _ in list(train_set) + list(val_set):
            if len(X) > train_cfg.max_length:
                raise TrainingError(f"sequence of {len(X)} frames exceeds max_length")

    train_set = [(np.asarray(X, dtype=np.float64), np.asarray(y)) for X, y in train_set]
    val_set = [(np.asarray(X, dtype=np.float64), np.asarray(y)) for X, y in val_set]
    params = init_params(model_cfg) if params is None else copy.deepcopy(params)
    try:
        initial_val = pooled_loss(params, model_cfg, val_set, weights)
    except DegenerateBatchError as e:
        raise TrainingError(f"validation set: {e}") from e

    rng = np.random.default_rng(train_cfg.seed)
    state = {}
    stopper = EarlyStopping(train_cfg.patience)
    best = copy.deepcopy(params)
    history = []
    bs = train_cfg.batch_size
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        batch_losses = []
        for start in range(0, len(order), bs):
            idx = sorted(order[start:start + bs])
            loss, grads, stats_seq = batch_loss_and_grads(
                params, model_cfg, [train_set[i] for i in idx], weights)
            if grads is None:
                continue
            try:
                params, state = rmsprop_step(params, grads, state, train_cfg.learning_rate,
                                             train_cfg.rmsprop_decay, train_cfg.rmsprop_eps)
            except DivergenceError as e:
                raise DivergenceError(f"epoch {epoch}: {e}") from e
            update_running_stats(params, stats_seq, model_cfg.bn_momentum)
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses)) if batch_losses else math.nan
        val_loss = pooled_loss(params, model_cfg, val_set, weights)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"epoch {epoch}: validation loss is not finite")
        history.append((epoch, train_loss, val_loss))
        if stopper.update(epoch, val_loss):
            best = copy.deepcopy(params)
        if log is not None:
            log(epoch, train_loss, val_loss)
        if stopper.should_stop:
            break
    return TrainResult(best, history, stopper.best_epoch, stopper.best_loss, initial_val,
                       stopper.should_stop)


# --------------------------------------------------------------------------
# model container

def save_model(out_dir, params, cfg, meta=None):
    """Write ``model.json`` and ``model.dat`` (float64 LE in ``param_names`` order)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = param_names(cfg)
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "param_order": [[n, list(params[n].shape)] for n in names],
        **(meta or {}),
    }
    (out / "model.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    flat = np.concatenate([np.asarray(params[n], dtype=np.float64).ravel() for n in names])
    write_array(out / "model.dat", flat, "<f8")


def load_model(in_dir):
    """Return ``(params, cfg, header)``."""
    d = Path(in_dir)
    try:
        header = json.loads((d / "model.json").read_text(encoding="utf-8"))
        cfg = ModelConfig.from_dict(header["config"]).validate()
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{d}: malformed model.json ({e})") from e
    shapes = param_shapes(cfg)
    declared = [(n, tuple(s)) for n, s in header.get("param_order", [])]
    if declared and declared != list(shapes.items()):
        raise MalformedHeaderError(f"{d}: param_order does not match config")
    total = sum(int(np.prod(s)) for s in shapes.values())
    flat = read_array(d / "model.dat", "<f8", (total,))
    params, pos = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return params, cfg, header


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tl, vl in history:
            w.writerow([epoch, repr(float(tl)), repr(float(vl))])


def read_history(path):
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]))
                for r in csv.DictReader(fh)]
