"""Accuracy, macro AUROC and macro average precision.

Single-class label columns cannot be scored by AUROC/AUPR; they are skipped
from the macro average (with a warning) and only an all-degenerate input
raises :class:`DegenerateColumn`.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import DegenerateColumn, ShapeMismatch


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def _check_pair(pred, labels):
    pred, labels = _as_2d(pred), _as_2d(labels)
    if pred.shape != labels.shape:
        raise ShapeMismatch(f"predictions {pred.shape} vs labels {labels.shape}")
    if pred.shape[0] < 1:
        raise ShapeMismatch("need at least one sample")
    return pred, labels


def accuracy(pred, labels, threshold: float = 0.5) -> float:
    """Per-label thresholded accuracy (``pred >= threshold`` is positive), macro-averaged."""
    pred, labels = _check_pair(pred, labels)
    per_label = ((pred >= threshold) == (labels > 0.5)).mean(axis=0)
    return math.fsum(per_label) / len(per_label)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: share of (pos, neg) pairs ranked correctly, ties count 1/2.

    Uses mid-ranks, so the pair count is an exact half-integer.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(labels).ravel() > 0.5
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateColumn("AUROC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # mid-rank for each run of tied scores (1-based)
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(scores)]])
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    pairs_won = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return pairs_won / (n_pos * n_neg)


def aupr(scores, labels) -> float:
    """Average precision: mean of precision at the rank of each positive.

    Scores are sorted descending; tied scores keep their original order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(labels).ravel() > 0.5
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DegenerateColumn("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return math.fsum(precision[hits].tolist()) / n_pos


def _macro(metric, pred, labels, needs_negatives: bool, warn: bool) -> float:
    pred, labels = _check_pair(pred, labels)
    values, skipped = [], []
    for t in range(pred.shape[1]):
        n_pos = int((labels[:, t] > 0.5).sum())
        if n_pos == 0 or (needs_negatives and n_pos == labels.shape[0]):
            skipped.append(t)
            continue
        values.append(metric(pred[:, t], labels[:, t]))
    if not values:
        raise DegenerateColumn(f"all {pred.shape[1]} label columns are single-class")
    if skipped and warn:
        warnings.warn(f"skipped single-class label columns {skipped}", RuntimeWarning, stacklevel=3)
    return math.fsum(values) / len(values)


def auroc_macro(pred, labels, warn: bool = True) -> float:
    return _macro(auroc, pred, labels, needs_negatives=True, warn=warn)


def aupr_macro(pred, labels, warn: bool = True) -> float:
    return _macro(aupr, pred, labels, needs_negatives=False, warn=warn)


def safe_auroc(pred, labels) -> float:
    """Macro AUROC, or NaN when nothing can be scored."""
    try:
        return auroc_macro(pred, labels, warn=False)
    except (DegenerateColumn, ShapeMismatch):
        return float("nan")
