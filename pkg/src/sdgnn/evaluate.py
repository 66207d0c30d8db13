"""AUROC, thresholded classification metrics, and a brute-force AUROC oracle."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: labels contain a single class")
    return scores, labels == 1, n_pos, n_neg


def auroc(scores, labels):
    """Mann-Whitney AUROC with average ranks; positive/negative ties count 1/2."""
    scores, pos, n_pos, n_neg = _split(scores, labels)
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_oracle(scores, labels):
    """Explicit loop over all positive/negative pairs."""
    scores, pos, n_pos, n_neg = _split(scores, labels)
    wins = 0.0
    ties = 0.0
    for sp in scores[pos]:
        for sn in scores[~pos]:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                ties += 1.0
    return float((wins + 0.5 * ties) / (n_pos * n_neg))


@dataclass
class MetricsReport:
    auroc: float | None
    f1: float
    precision: float
    recall: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def classification_metrics(scores, labels, threshold=0.5, with_auroc=True):
    """Predict positive iff score >= threshold. P, R, F1 are 0 when undefined."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    pred = scores >= threshold
    actual = labels == 1
    tp = int((pred & actual).sum())
    fp = int((pred & ~actual).sum())
    fn = int((~pred & actual).sum())
    tn = int((~pred & ~actual).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(
        auroc=auroc(scores, labels) if with_auroc else None,
        f1=f1, precision=precision, recall=recall, threshold=threshold,
        tp=tp, fp=fp, tn=tn, fn=fn, n=int(labels.size),
    )


def tune_threshold(scores, labels):
    """Threshold among the observed scores maximising F1 (ties -> lowest threshold)."""
    best_t, best_f1 = 0.5, -1.0
    for t in np.unique(scores):
        f1 = classification_metrics(scores, labels, t, with_auroc=False).f1
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t
