"""Glue between features, training, prediction and scoring."""
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data as D
from .ensemble import arousal_score, average_posteriors
from .errors import TrainingError
from .metrics import gross_metrics
from .model import (
    ModelConfig,
    class_weight_from_prevalence,
    forward,
    train,
)
from .scattering import apply_normalizer, fit_normalizer, scatter_record


def derive_seed(seed, stage):
    """Per-stage seed: first word of ``SeedSequence([seed, crc32(stage)])``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def scatter_records(records, fb, jobs=1):
    if jobs > 1 and len(records) > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(lambda r: scatter_record(r, fb), records))
    return [scatter_record(r, fb) for r in records]


def to_sequences(features, max_length=None):
    """``(X, targets)`` pairs with X flattened channel-major; padded if max_length is set."""
    out = []
    for f in features:
        if max_length is None:
            X = f.flat()
            y = f.frame_targets if f.frame_targets is not None else np.ones(f.n_frames, np.uint8)
        else:
            data, y = D.pad_features(f, max_length)
            X = data.reshape(max_length, -1).astype(np.float64)
        out.append((X, np.asarray(y, dtype=np.uint8)))
    return out


def normalize_all(features, norm):
    return [f if f.normalized else apply_normalizer(f, norm) for f in features]


def train_bdc(train_feats, val_feats, model_cfg, train_cfg, log=None):
    """Fit the normalizer on training features, pad, and train one classifier.

    Returns ``(TrainResult, normalizer_or_None, model_cfg, train_cfg)`` with
    ``input_dim``, ``max_length`` and class weights resolved from the data.
    """
    from dataclasses import replace

    if not train_feats or not val_feats:
        raise TrainingError("empty training or validation split")
    norm = None
    if not train_feats[0].normalized:
        norm = fit_normalizer(train_feats)
        train_feats = normalize_all(train_feats, norm)
        val_feats = normalize_all(val_feats, norm)
    max_length = train_cfg.max_length or max(f.n_frames for f in train_feats + val_feats)
    input_dim = train_feats[0].n_channels * train_feats[0].n_paths
    model_cfg = replace(model_cfg, input_dim=input_dim)
    if train_cfg.auto_class_weight:
        w = class_weight_from_prevalence([f.frame_targets for f in train_feats])
        train_cfg = replace(train_cfg, class_weights=w)
    train_cfg = replace(train_cfg, max_length=max_length)
    result = train(model_cfg, to_sequences(train_feats, max_length),
                   to_sequences(val_feats, max_length), train_cfg, log=log)
    return result, norm, model_cfg, train_cfg


def predict_probs(params, cfg, norm, features):
    """Posteriors (frames x 3) for one record, unpadded, inference mode."""
    f = features if features.normalized or norm is None else apply_normalizer(features, norm)
    return forward(params, cfg, f.flat(), mode="infer")


def ensemble_probs(models, features):
    """Average posteriors of ``models`` (list of (params, cfg, norm)) on one record."""
    return average_posteriors([predict_probs(p, c, n, features) for p, c, n in models])


def score_records(probs_by_record, features_by_record):
    """Gross metrics from per-record posteriors and the features' frame targets."""
    pairs = []
    for rid in sorted(probs_by_record):
        pairs.append((arousal_score(probs_by_record[rid]),
                      features_by_record[rid].frame_targets))
    return gross_metrics(pairs)
