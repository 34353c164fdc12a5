"""Gross AUROC / AUPRC over pooled frames.

Scores are compared with exact equality; equal scores form one threshold
block. Compute scores in float64 before comparing.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, UndefinedMetricError


@dataclass
class MetricsReport:
    auroc: float
    auprc: float
    n_pos: int
    n_neg: int
    prevalence: float
    roc_points: list = field(default_factory=list)  # (fpr, tpr)
    pr_points: list = field(default_factory=list)  # (recall, precision)

    def to_dict(self, curves=False):
        d = {"auroc": self.auroc, "auprc": self.auprc, "n_pos": self.n_pos,
             "n_neg": self.n_neg, "prevalence": self.prevalence}
        if curves:
            d["roc_points"] = [list(p) for p in self.roc_points]
            d["pr_points"] = [list(p) for p in self.pr_points]
        return d


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be binary (0/1)")
    return s, y.astype(bool)


def _blocks(s, y):
    """Per distinct score (descending): positives and totals in each tie block."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    tp = np.add.reduceat(y.astype(np.int64), starts)
    n = np.diff(np.r_[starts, s.size])
    return tp, n


def auroc(scores, labels):
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC undefined for single-class input (n_pos={n_pos}, n_neg={n_neg})")
    tp, n = _blocks(s, y)
    fp = n - tp
    neg_above = np.cumsum(fp) - fp
    # integer arithmetic: 2 * (wins) + ties, exact before the final division
    twice_u = int((tp * (2 * (n_neg - neg_above - fp) + fp)).sum())
    return twice_u / (2.0 * n_pos * n_neg)


def auprc(scores, labels):
    """Average precision: sum over tie blocks of recall gain times block-end precision."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC undefined without positive frames")
    tp, n = _blocks(s, y)
    ctp = np.cumsum(tp)
    cn = np.cumsum(n)
    return float((tp * (ctp / cn)).sum() / n_pos)


def roc_curve(scores, labels):
    s, y = _check(scores, labels)
    tp, n = _blocks(s, y)
    P, N = max(int(y.sum()), 1), max(int((~y).sum()), 1)
    tpr = np.r_[0, np.cumsum(tp)] / P
    fpr = np.r_[0, np.cumsum(n - tp)] / N
    return list(zip(fpr.tolist(), tpr.tolist()))


def pr_curve(scores, labels):
    s, y = _check(scores, labels)
    tp, n = _blocks(s, y)
    P = max(int(y.sum()), 1)
    ctp = np.cumsum(tp)
    return list(zip((ctp / P).tolist(), (ctp / np.cumsum(n)).tolist()))


def pool_frames(predictions):
    """Concatenate ``(scores, frame_labels)`` pairs, drop PAD, map 2 -> 1, 1 -> 0."""
    predictions = list(predictions)
    if not predictions:
        raise InputError("no records to pool")
    s_all, y_all = [], []
    for scores, labels in predictions:
        scores = np.asarray(scores, dtype=np.float64).ravel()
        labels = np.asarray(labels).ravel()
        if scores.shape != labels.shape:
            raise InputError(f"{scores.size} scores for {labels.size} frame labels")
        keep = labels != 0
        s_all.append(scores[keep])
        y_all.append((labels[keep] == 2).astype(np.int8))
    return np.concatenate(s_all), np.concatenate(y_all)


def gross_metrics(predictions, curves=True):
    """Pooled AUROC / AUPRC with PAD frames excluded."""
    s, y = pool_frames(predictions)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    report = MetricsReport(auroc(s, y), auprc(s, y), n_pos, n_neg, n_pos / max(y.size, 1))
    if curves:
        report.roc_points = roc_curve(s, y)
        report.pr_points = pr_curve(s, y)
    return report
