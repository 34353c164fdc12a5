"""Records, on-disk containers, dataset partitioning and the synthetic PSG generator."""
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._binio import read_array, write_array
from .errors import (
    ChannelLookupError,
    ConfigError,
    DimensionMismatchError,
    GenerationError,
    LengthError,
    MalformedHeaderError,
    PartitionError,
    TruncatedDataError,
)

FORMAT_VERSION = 1

CHANNEL_NAMES = (
    "F3-M2", "F4-M1", "C3-M2", "C4-M1", "O1-M2", "O2-M1", "E1-M2",
    "Chin1-Chin2", "ABD", "CHEST", "AIRFLOW", "SaO2", "ECG",
)
EEG_CHANNELS = ("F3-M2", "F4-M1", "C3-M2", "C4-M1", "O1-M2", "O2-M1")
EMG_CHANNELS = ("Chin1-Chin2", "ABD", "CHEST")

# Signal groups, in the order the ablation reports them.
CHANNEL_GROUPS = {
    "All": CHANNEL_NAMES,
    "All EMG": EMG_CHANNELS,
    "SaO2": ("SaO2",),
    "All EEG": EEG_CHANNELS,
    "F3-M2": ("F3-M2",),
    "ECG": ("ECG",),
    "AIRFLOW": ("AIRFLOW",),
}


@dataclass
class Record:
    id: str
    fs: float
    channel_names: list
    samples: np.ndarray  # (n_samples, n_channels)
    targets: np.ndarray  # (n_samples,) uint8 in {0, 1, 2}
    events: list = field(default_factory=list)  # [(start, stop)) sample intervals

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.targets = np.asarray(self.targets, dtype=np.uint8)
        if self.samples.ndim != 2 or self.samples.shape[1] != len(self.channel_names):
            raise DimensionMismatchError(
                f"{self.id}: samples shape {self.samples.shape} vs "
                f"{len(self.channel_names)} channel names")
        if self.targets.shape != (self.samples.shape[0],):
            raise DimensionMismatchError(
                f"{self.id}: {self.targets.shape[0]} targets for {self.samples.shape[0]} samples")
        if not self.fs > 0:
            raise ConfigError(f"{self.id}: fs must be positive")

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def n_channels(self):
        return self.samples.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        return (self.id == other.id and self.fs == other.fs
                and list(self.channel_names) == list(other.channel_names)
                and np.array_equal(self.samples, other.samples)
                and np.array_equal(self.targets, other.targets))


def save_record(rec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "id": rec.id,
        "fs": rec.fs,
        "channel_names": list(rec.channel_names),
        "n_channels": rec.n_channels,
        "n_samples": rec.n_samples,
        "events": [[int(a), int(b)] for a, b in rec.events],
    }
    (out / "header.json").write_text(json.dumps(header, indent=1) + "\n")
    write_array(out / "signals.dat", rec.samples, "<f4")
    write_array(out / "targets.dat", rec.targets, "u1")


def load_record(in_dir):
    d = Path(in_dir)
    try:
        h = json.loads((d / "header.json").read_text(encoding="utf-8"))
        names = [str(n) for n in h["channel_names"]]
        n = int(h["n_samples"])
        c = int(h.get("n_channels", len(names)))
        rid, fs = str(h["id"]), float(h["fs"])
        events = [tuple(e) for e in h.get("events", [])]
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{d}: malformed header.json ({e})") from e
    if c != len(names):
        raise DimensionMismatchError(
            f"{d}: header declares {c} channels but names {len(names)}")
    sig = d / "signals.dat"
    size = sig.stat().st_size if sig.exists() else 0
    row = 4 * c
    if n > 0 and size != n * row and size % (4 * n) == 0:
        raise DimensionMismatchError(
            f"{sig}: data width is {size // (4 * n)} channels, header says {c}")
    try:
        samples = read_array(sig, "<f4", (n, c))
        targets = read_array(d / "targets.dat", "u1", (n,))
    except TruncatedDataError:
        raise
    return Record(rid, fs, names, samples, targets, events)


def list_record_dirs(root):
    root = Path(root)
    if (root / "header.json").exists():
        return [root]
    if (root / "records").is_dir():
        root = root / "records"
    return sorted(p.parent for p in root.glob("*/header.json"))


def resolve_group(group):
    """Channel names for a group name, a single channel name, or a list of names."""
    if isinstance(group, str):
        if group in CHANNEL_GROUPS:
            return list(CHANNEL_GROUPS[group])
        if group in CHANNEL_NAMES:
            return [group]
        raise ChannelLookupError(f"unknown channel group {group!r}")
    return list(group)


def select_channels(rec, group):
    names = resolve_group(group)
    missing = [n for n in names if n not in rec.channel_names]
    if missing:
        raise ChannelLookupError(f"{rec.id}: channels not present: {missing}")
    # keep the record's own channel order
    keep = [i for i, n in enumerate(rec.channel_names) if n in names]
    return Record(rec.id, rec.fs, [rec.channel_names[i] for i in keep],
                  rec.samples[:, keep], rec.targets, list(rec.events))


# --------------------------------------------------------------------------
# partitioning

@dataclass
class DatasetIndex:
    ids: list
    hot: list
    folds: list  # 10 lists of ids
    seed: int

    def split(self, k):
        """(train, val, test) id lists for cross-validation iteration ``k``."""
        n = len(self.folds)
        if not 0 <= k < n:
            raise PartitionError(f"fold {k} out of range 0..{n - 1}")
        test = list(self.folds[k])
        val = list(self.folds[(k + 1) % n])
        train = [i for j, f in enumerate(self.folds) if j not in (k, (k + 1) % n) for i in f]
        return train, val, test

    def assignment(self):
        out = {i: "HOT" for i in self.hot}
        for k, f in enumerate(self.folds):
            out.update({i: k for i in f})
        return out

    def to_dict(self):
        return {"format_version": FORMAT_VERSION, "seed": self.seed, "ids": list(self.ids),
                "hot": list(self.hot), "folds": [list(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["ids"]), list(d["hot"]), [list(f) for f in d["folds"]], int(d["seed"]))


def partition(ids, seed, n_folds=10, hot_fraction=0.1):
    """Seeded HOT + k-fold split.

    The first ``ceil(hot_fraction * n)`` shuffled ids form the held-out set;
    the rest are dealt into ``n_folds`` near-equal contiguous folds.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise PartitionError("record ids must be unique")
    if len(ids) < n_folds + 2:
        raise PartitionError(f"need at least {n_folds + 2} records, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_hot = math.ceil(hot_fraction * len(ids))
    hot, pool = shuffled[:n_hot], shuffled[n_hot:]
    folds = [list(f) for f in np.array_split(np.array(pool, dtype=object), n_folds)]
    return DatasetIndex(ids, hot, folds, int(seed))


def save_index(index, path):
    Path(path).write_text(json.dumps(index.to_dict(), indent=1) + "\n")


def load_index(path):
    try:
        return DatasetIndex.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{path}: malformed index ({e})") from e


def pad_features(features, max_length):
    """Zero-pad features to ``max_length`` frames; padded frames are PAD (0).

    Returns ``(data, targets)`` with shapes (max_length, C, M) and (max_length,).
    """
    n = features.n_frames
    if n > max_length:
        raise LengthError(f"{features.record_id}: {n} frames exceed max_length {max_length}")
    data = np.zeros((max_length,) + features.data.shape[1:], dtype=features.data.dtype)
    data[:n] = features.data
    targets = np.zeros(max_length, dtype=np.uint8)
    if features.frame_targets is not None:
        targets[:n] = features.frame_targets
    return data, targets


# --------------------------------------------------------------------------
# synthetic generator

DEFAULT_SPECTRAL_EXPONENTS = {
    "F3-M2": 1.0, "F4-M1": 1.0, "C3-M2": 1.0, "C4-M1": 1.0, "O1-M2": 1.0, "O2-M1": 1.0,
    "E1-M2": 1.5, "Chin1-Chin2": 0.3, "ABD": 2.0, "CHEST": 2.0, "AIRFLOW": 2.0,
    "SaO2": 2.0, "ECG": 0.5,
}

# channel -> (amplitude multiplier range, burst band in Hz, burst amplitude)
DEFAULT_EVENT_EFFECTS = {
    **{c: {"gain": [2.0, 4.0], "burst_hz": [16.0, 40.0], "burst_amp": 1.0} for c in EEG_CHANNELS},
    "Chin1-Chin2": {"gain": [2.0, 4.0], "burst_hz": [30.0, 90.0], "burst_amp": 1.5},
    "AIRFLOW": {"gain": [2.0, 4.0], "burst_hz": [4.0, 12.0], "burst_amp": 0.5},
}


@dataclass
class SynthConfig:
    n_records: int = 40
    duration_s: float = 600.0
    fs: float = 200.0
    prevalence: float = 0.07
    event_min_s: float = 3.0
    event_max_s: float = 15.0
    min_gap_s: float = 1.0
    ramp_s: float = 0.25
    sao2_lag_s: float = 10.0
    sao2_dip_pct: list = field(default_factory=lambda: [2.0, 4.0])
    respiration_hz: list = field(default_factory=lambda: [0.2, 0.3])
    channel_names: list = field(default_factory=lambda: list(CHANNEL_NAMES))
    spectral_exponents: dict = field(default_factory=lambda: dict(DEFAULT_SPECTRAL_EXPONENTS))
    event_effects: dict = field(default_factory=lambda: {
        k: dict(v) for k, v in DEFAULT_EVENT_EFFECTS.items()})
    seed: int = 0

    def validate(self):
        if not 0 < self.prevalence < 0.5:
            raise ConfigError(f"prevalence must be in (0, 0.5), got {self.prevalence}")
        if not 0 < self.event_min_s <= self.event_max_s < self.duration_s:
            raise ConfigError("event durations must satisfy 0 < min <= max < duration_s")
        if self.n_records < 1 or self.fs <= 0:
            raise ConfigError("n_records >= 1 and fs > 0 required")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def colored_noise(rng, n, exponent, fs, f_min=0.05):
    """Unit-variance noise with a 1/f^exponent power spectrum above ``f_min``."""
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    gain = np.zeros_like(f)
    gain[1:] = np.maximum(f[1:], f_min) ** (-exponent / 2.0)
    x = np.fft.irfft(spec * gain, n)
    return x / x.std()


def _bandpass_noise(rng, n, lo, hi, fs):
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    s = x.std()
    return x / s if s > 0 else x


def place_events(rng, n, cfg):
    """Non-overlapping ``[start, stop)`` intervals covering about ``prevalence * n`` samples."""
    fs = cfg.fs
    lo, hi = int(round(cfg.event_min_s * fs)), int(round(cfg.event_max_s * fs))
    gap = int(round(cfg.min_gap_s * fs))
    target = cfg.prevalence * n
    if 1.2 * target < lo:
        raise GenerationError(
            f"prevalence {cfg.prevalence} unreachable: one {cfg.event_min_s} s event "
            f"exceeds the +20% band of a {cfg.duration_s} s record")
    events, total = [], 0
    while total < target:
        remaining = int(math.ceil(target - total))
        if remaining <= hi:
            # last event closes the gap
            d = max(lo, remaining)
        elif remaining - lo >= lo:
            # leave room for at least one more minimum-length event
            d = int(rng.integers(lo, min(hi, remaining - lo) + 1))
        else:
            d = int(rng.integers(lo, hi + 1))
        if total + d > 1.2 * target:
            break
        for _ in range(1000):
            s = int(rng.integers(0, n - d + 1))
            if all(s + d + gap <= a or s >= b + gap for a, b in events):
                break
        else:
            raise GenerationError("could not place a non-overlapping event; record too full")
        events.append((s, s + d))
        total += d
    frac = total / n
    if not 0.8 * cfg.prevalence <= frac <= 1.2 * cfg.prevalence:
        raise GenerationError(
            f"realized prevalence {frac:.4f} outside +/-20% of {cfg.prevalence}")
    return sorted(events)


def _event_envelope(n, events, ramp):
    """1 inside events with raised-cosine ramps of ``ramp`` samples at each end."""
    env = np.zeros(n)
    for a, b in events:
        w = np.ones(b - a)
        r = min(ramp, (b - a) // 2)
        if r > 0:
            edge = 0.5 - 0.5 * np.cos(np.pi * (np.arange(r) + 0.5) / r)
            w[:r] = edge
            w[-r:] = edge[::-1]
        env[a:b] = w
    return env


def synth_record(cfg, index, rng):
    fs = cfg.fs
    n = int(round(cfg.duration_s * fs))
    events = place_events(rng, n, cfg)
    env = _event_envelope(n, events, int(round(cfg.ramp_s * fs)))
    t = np.arange(n) / fs
    resp_hz = rng.uniform(*cfg.respiration_hz)
    breathing = np.sin(2 * np.pi * resp_hz * t + rng.uniform(0, 2 * np.pi))

    cols = []
    for name in cfg.channel_names:
        if name == "SaO2":
            slow = _bandpass_noise(rng, n, 0.01, 0.05, fs)
            x = 95.0 + 0.5 * slow
            lag = int(round(cfg.sao2_lag_s * fs))
            for a, b in events:
                depth = rng.uniform(*cfg.sao2_dip_pct)
                length = (b - a) + lag
                start = min(a + lag, n)
                stop = min(start + length, n)
                k = np.arange(stop - start)
                x[start:stop] -= depth * np.sin(np.pi * (k + 0.5) / length) ** 2
        else:
            x = colored_noise(rng, n, cfg.spectral_exponents.get(name, 1.0), fs)
            if name in ("ABD", "CHEST", "AIRFLOW"):
                x = 0.3 * x + breathing
            eff = cfg.event_effects.get(name)
            if eff:
                gains = np.ones(n)
                for (a, b) in events:
                    gains[a:b] = rng.uniform(*eff["gain"])
                lo, hi = eff["burst_hz"]
                burst = eff["burst_amp"] * _bandpass_noise(rng, n, lo, hi, fs)
                x = x * (1.0 + (gains - 1.0) * env) + burst * env
        cols.append(x)
    samples = np.stack(cols, axis=1).astype(np.float32)
    targets = np.ones(n, dtype=np.uint8)
    for a, b in events:
        targets[a:b] = 2
    return Record(f"syn{index:04d}", fs, list(cfg.channel_names), samples, targets, events)


def synth_generate(cfg):
    """Generate ``cfg.n_records`` records; record ``i`` depends only on (seed, i)."""
    cfg.validate()
    out = []
    for i in range(cfg.n_records):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), i]))
        out.append(synth_record(cfg, i, rng))
    return out


def events_from_targets(targets):
    """Maximal runs of label 2 as ``[start, stop)`` intervals."""
    y = (np.asarray(targets) == 2).astype(np.int8)
    d = np.diff(np.concatenate([[0], y, [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))
