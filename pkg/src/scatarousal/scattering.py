"""Order 0/1/2 scattering per channel, decimated by the averaging window.

Each layer is a linear convolution of a signal supported on ``[0, Lp)``
(``Lp`` = length rounded up to a multiple of ``T``) followed by restriction
back to ``[0, Lp)``. Wavelet convolutions run through one zero-padded FFT
per signal; the final low-pass is only evaluated at frame centres.
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import fft as sfft

from .errors import (
    FitError,
    InputError,
    MalformedHeaderError,
    ShapeError,
    StateError,
)
from ._binio import read_array, write_array

FORMAT_VERSION = 1
LABEL_PAD, LABEL_NON_AROUSAL, LABEL_AROUSAL = 0, 1, 2


@dataclass(frozen=True, order=True)
class ScatteringPath:
    order: int
    j1: int = -1
    j2: int = -1

    def __post_init__(self):
        if self.order == 0 and (self.j1, self.j2) != (-1, -1):
            raise ValueError("order-0 path carries no scale indices")
        if self.order == 1 and (self.j1 < 0 or self.j2 != -1):
            raise ValueError(f"bad order-1 path {self}")
        if self.order == 2 and not 0 <= self.j1 < self.j2:
            raise ValueError(f"order-2 path needs 0 <= j1 < j2, got {self}")
        if self.order not in (0, 1, 2):
            raise ValueError(f"order must be 0, 1 or 2, got {self.order}")

    def as_triple(self):
        return [self.order, self.j1, self.j2]


def path_count(J, m, p=1):
    """Number of scattering coefficients up to order ``m`` including order 0."""
    return sum(p ** k * math.comb(J, k) for k in range(m + 1))


def generate_paths(n_filters, m_max=2, include_order0=False):
    paths = [ScatteringPath(0)] if include_order0 else []
    paths += [ScatteringPath(1, j) for j in range(n_filters)]
    if m_max >= 2:
        paths += [ScatteringPath(2, a, b) for a, b in combinations(range(n_filters), 2)]
    return sorted(paths)


def paths_for(fb):
    cfg = fb.config
    return generate_paths(fb.n_filters, cfg.m_max, cfg.include_order0)


@dataclass
class ScatteringFeatures:
    record_id: str
    channel_names: list
    paths: list
    frame_rate: float
    data: np.ndarray  # (n_frames, n_channels, M)
    frame_targets: np.ndarray = None
    normalized: bool = False

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_paths(self):
        return self.data.shape[2]

    def select_channels(self, names):
        idx = [self.channel_names.index(n) for n in names]
        return replace(self, channel_names=list(names), data=self.data[:, idx, :])

    def flat(self):
        """Frames x (channels * M), channel-major, float64."""
        return self.data.reshape(self.n_frames, -1).astype(np.float64)


@dataclass
class NormalizerParams:
    medians: np.ndarray  # (n_channels, M)
    mu: np.ndarray = None  # (M,)
    eps: float = 1e-12
    paths: list = field(default_factory=list)
    channel_names: list = field(default_factory=list)

    def __post_init__(self):
        self.medians = np.asarray(self.medians, dtype=np.float64)
        if self.mu is None:
            self.mu = np.ones(self.medians.shape[1])
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if np.any(self.mu <= 0) or self.eps <= 0 or np.any(self.medians < 0):
            raise FitError("normalizer requires mu > 0, eps > 0 and medians >= 0")

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "eps": self.eps,
            "mu": self.mu.tolist(),
            "medians": self.medians.tolist(),
            "paths": [p.as_triple() for p in self.paths],
            "channel_names": list(self.channel_names),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["medians"], dtype=np.float64), np.array(d["mu"]), d["eps"],
                   [ScatteringPath(*t) for t in d.get("paths", [])],
                   list(d.get("channel_names", [])))


# --------------------------------------------------------------------------
# cascade

def _centered_kernel(spec, N):
    """Embed the n-tap circular impulse response of ``spec`` in an N buffer."""
    n = spec.shape[-1]
    h = np.fft.ifft(spec, axis=-1)
    out = np.zeros(spec.shape[:-1] + (N,), dtype=np.complex128)
    out[..., : n // 2] = h[..., : n // 2]
    out[..., N - n // 2:] = h[..., n // 2:]
    return sfft.fft(out, axis=-1)


def _plan(fb, Lp):
    """Filters resampled to the FFT length used for a padded length ``Lp``."""
    cache = fb.__dict__.setdefault("_plans", {})
    if Lp not in cache:
        n = fb.config.n_fft
        N = sfft.next_fast_len(Lp + n // 2)
        psi_N = _centered_kernel(fb.psi_hat, N)
        # low-pass tap g[k] multiplies U[c + 1 + k - n/2] for a frame centred at c
        h_phi = np.fft.ifft(fb.phi_hat).real
        g = h_phi[(n // 2 - 1 - np.arange(n)) % n].copy()
        cache[Lp] = (N, psi_N, g)
    return cache[Lp]


def _lowpass_frames(U, g, T, n_frames):
    """Low-pass rows of ``U`` (k, Lp) and sample at frame centres iT + T/2."""
    n = g.shape[0]
    k, Lp = U.shape
    pad = np.zeros((k, Lp + n))
    pad[:, n // 2: n // 2 + Lp] = U
    s0, s1 = pad.strides
    start = T // 2 + 1
    win = as_strided(pad[:, start:], shape=(k, n_frames, n), strides=(s0, T * s1, s1),
                     writeable=False)
    return win @ g


def padded_length(n_samples, T):
    return max(1, math.ceil(n_samples / T)) * T


def scatter_channel(x, fb):
    """Scattering coefficients of one channel.

    Returns an array (n_frames, M) in float64 ordered as ``paths_for(fb)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise InputError(f"expected a non-empty 1-D signal, got shape {x.shape}")
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise InputError(f"non-finite sample at index {int(bad[0])}")

    cfg = fb.config
    T = cfg.T
    Lp = padded_length(x.size, T)
    n_frames = Lp // T
    N, psi_N, g = _plan(fb, Lp)
    J = fb.n_filters

    xf = sfft.fft(x, n=N)
    U1 = np.abs(sfft.ifft(xf[None, :] * psi_N, axis=-1)[:, :Lp])
    blocks = []
    if cfg.include_order0:
        x_pad = np.zeros(Lp)
        x_pad[: x.size] = x
        blocks.append(_lowpass_frames(x_pad[None, :], g, T, n_frames))
    blocks.append(_lowpass_frames(U1, g, T, n_frames))
    if cfg.m_max >= 2 and J > 1:
        U1f = sfft.fft(U1, n=N, axis=-1)
        for j1 in range(J - 1):
            U2 = np.abs(sfft.ifft(U1f[j1][None, :] * psi_N[j1 + 1:], axis=-1)[:, :Lp])
            blocks.append(_lowpass_frames(U2, g, T, n_frames))
    return np.concatenate(blocks, axis=0).T.copy()


def frame_labels(targets, T):
    """Decimate per-sample labels to one label per window of ``T`` samples.

    A window is Arousal when at least half of its non-PAD samples are
    arousal, Non-arousal when it has any other non-PAD sample, else PAD.
    """
    y = np.asarray(targets)
    unknown = ~np.isin(y, (0, 1, 2))
    if unknown.any():
        i = int(np.flatnonzero(unknown)[0])
        raise InputError(f"unknown label {y[i]!r} at sample {i}")
    Lp = padded_length(y.size, T)
    yp = np.zeros(Lp, dtype=np.int64)
    yp[: y.size] = y
    w = yp.reshape(-1, T)
    n_valid = (w != LABEL_PAD).sum(axis=1)
    n_arousal = (w == LABEL_AROUSAL).sum(axis=1)
    out = np.where(n_valid > 0, LABEL_NON_AROUSAL, LABEL_PAD)
    out[(n_valid > 0) & (2 * n_arousal >= n_valid)] = LABEL_AROUSAL
    return out.astype(np.uint8)


def scatter_record(rec, fb, jobs=1):
    """Scatter every channel of ``rec``; also decimates its targets."""
    samples = np.asarray(rec.samples)
    if samples.ndim != 2 or samples.shape[1] < 1:
        raise InputError(f"record {rec.id} has no channels")

    def one(c):
        try:
            return scatter_channel(samples[:, c], fb)
        except InputError as e:
            raise InputError(f"channel {rec.channel_names[c]}: {e}") from e

    if jobs > 1:
        _plan(fb, padded_length(samples.shape[0], fb.config.T))
        with ThreadPoolExecutor(jobs) as ex:
            per_channel = list(ex.map(one, range(samples.shape[1])))
    else:
        per_channel = [one(c) for c in range(samples.shape[1])]
    data = np.stack(per_channel, axis=1).astype(np.float32)
    targets = None
    if getattr(rec, "targets", None) is not None:
        targets = frame_labels(rec.targets, fb.config.T)
    return ScatteringFeatures(
        record_id=rec.id,
        channel_names=list(rec.channel_names),
        paths=paths_for(fb),
        frame_rate=fb.config.fs / fb.config.T,
        data=data,
        frame_targets=targets,
    )


# --------------------------------------------------------------------------
# normalization

def fit_normalizer(train_features, mu=None, eps=1e-12):
    """Per (channel, path) median over all pooled training frames, floored at eps."""
    train_features = list(train_features)
    if not train_features:
        raise FitError("cannot fit a normalizer on an empty training set")
    first = train_features[0]
    for f in train_features:
        if f.normalized:
            raise StateError(f"{f.record_id}: normalizer must be fitted on raw features")
        if f.data.shape[1:] != first.data.shape[1:]:
            raise ShapeError(
                f"{f.record_id}: layout {f.data.shape[1:]} != {first.data.shape[1:]}")
    pooled = np.concatenate([np.asarray(f.data, dtype=np.float64) for f in train_features])
    if pooled.shape[0] == 0:
        raise FitError("training features contain no frames")
    med = np.median(pooled, axis=0)
    med = np.maximum(med, eps)
    if mu is None:
        mu = np.ones(first.n_paths)
    return NormalizerParams(med, np.broadcast_to(np.asarray(mu, float), (first.n_paths,)).copy(),
                            eps, list(first.paths), list(first.channel_names))


def apply_normalizer(features, norm):
    """Return a copy with ``log1p(mu * x / median)`` applied elementwise."""
    if features.normalized:
        raise StateError(f"{features.record_id}: features are already normalized")
    if features.data.shape[1:] != norm.medians.shape:
        raise ShapeError(
            f"{features.record_id}: layout {features.data.shape[1:]} does not match "
            f"normalizer {norm.medians.shape}")
    if norm.paths and list(norm.paths) != list(features.paths):
        raise ShapeError(f"{features.record_id}: path list differs from normalizer")
    x = np.asarray(features.data, dtype=np.float64)
    out = np.log1p(norm.mu[None, None, :] * x / norm.medians[None, :, :])
    return replace(features, data=out.astype(features.data.dtype), normalized=True)


def save_normalizer(norm, path):
    Path(path).write_text(json.dumps(norm.to_dict(), indent=1) + "\n")


def load_normalizer(path):
    try:
        return NormalizerParams.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{path}: malformed normalizer ({e})") from e


# --------------------------------------------------------------------------
# container I/O

def save_features(feat, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "record_id": feat.record_id,
        "frame_rate": feat.frame_rate,
        "channel_names": list(feat.channel_names),
        "paths": [p.as_triple() for p in feat.paths],
        "normalized": bool(feat.normalized),
        "dims": list(feat.data.shape),
        "has_targets": feat.frame_targets is not None,
    }
    (out / "features.json").write_text(json.dumps(header, indent=1) + "\n")
    write_array(out / "features.dat", feat.data, "<f4")
    if feat.frame_targets is not None:
        write_array(out / "frame_targets.dat", feat.frame_targets, "u1")


def load_features(in_dir):
    d = Path(in_dir)
    try:
        h = json.loads((d / "features.json").read_text(encoding="utf-8"))
        dims = tuple(int(v) for v in h["dims"])
        paths = [ScatteringPath(*t) for t in h["paths"]]
        names = list(h["channel_names"])
        rid, rate, normalized = str(h["record_id"]), float(h["frame_rate"]), bool(h["normalized"])
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{d}: malformed features.json ({e})") from e
    if len(dims) != 3 or dims[1] != len(names) or dims[2] != len(paths):
        raise MalformedHeaderError(f"{d}: dims {dims} inconsistent with channels/paths")
    data = read_array(d / "features.dat", "<f4", dims)
    targets = None
    if h.get("has_targets", False):
        targets = read_array(d / "frame_targets.dat", "u1", (dims[0],))
    return ScatteringFeatures(rid, names, paths, rate, data, targets, normalized)


def list_feature_dirs(root):
    root = Path(root)
    if (root / "features.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/features.json"))
