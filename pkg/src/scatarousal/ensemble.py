"""Unweighted posterior averaging across ensemble members."""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import read_array, write_array
from .errors import InputError, MalformedHeaderError, ShapeError

FORMAT_VERSION = 1


@dataclass
class EnsemblePrediction:
    member_probs: list
    averaged: np.ndarray
    labels: np.ndarray


def average_posteriors(members):
    """Elementwise mean of member posteriors.

    Values are sorted across members before summation, so the result does not
    depend on member order, and the mean is taken as ``min + mean(x - min)``
    so identical members reproduce the member bit-for-bit.
    """
    members = [np.asarray(m, dtype=np.float64) for m in members]
    if not members:
        raise InputError("at least one ensemble member is required")
    shape = members[0].shape
    for i, m in enumerate(members):
        if m.shape != shape:
            raise ShapeError(f"member {i} has shape {m.shape}, expected {shape}")
    if len(members) == 1:
        return members[0].copy()
    stack = np.sort(np.stack(members), axis=0)
    low = stack[0]
    return low + (stack - low).sum(axis=0) / len(members)


def fuse_label(averaged):
    """Per-frame argmax; ties go to the higher class index."""
    p = np.asarray(averaged)
    return (p.shape[1] - 1 - np.argmax(p[:, ::-1], axis=1)).astype(np.uint8)


def arousal_score(averaged):
    return np.asarray(averaged)[:, 2].copy()


def ensemble_predict(members):
    avg = average_posteriors(members)
    return EnsemblePrediction(list(members), avg, fuse_label(avg))


def save_prediction(out_dir, record_id, probs, n_members, frame_rate):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probs = np.asarray(probs)
    header = {
        "format_version": FORMAT_VERSION,
        "record_id": record_id,
        "n_members": int(n_members),
        "frame_rate": float(frame_rate),
        "n_frames": int(probs.shape[0]),
    }
    (out / "pred.json").write_text(json.dumps(header, indent=1) + "\n")
    write_array(out / "probs.dat", probs, "<f4")


def load_prediction(in_dir):
    """Return ``(header, probs)`` with probs as float32 (frames x 3)."""
    d = Path(in_dir)
    try:
        h = json.loads((d / "pred.json").read_text(encoding="utf-8"))
        n = int(h["n_frames"])
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{d}: malformed pred.json ({e})") from e
    return h, read_array(d / "probs.dat", "<f4", (n, 3))


def list_prediction_dirs(root):
    root = Path(root)
    if (root / "pred.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/pred.json"))
