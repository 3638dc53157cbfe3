"""Evaluation metrics for the probing tasks."""

from __future__ import annotations

import numpy as np


def macro_f1(pred, true, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class absent from both pred and truth scores 0."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    scores = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def top1(scores, true) -> float:
    """Fraction of rows whose argmax equals the truth; ties go to the lowest index."""
    scores = np.asarray(scores)
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(true)))


def r2(pred, true) -> float:
    """Per-column ``1 - SSE/SST`` around the column mean of ``true``, averaged over columns."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.ndim == 1:
        pred, true = pred[:, None], true[:, None]
    sse = np.sum((true - pred) ** 2, axis=0)
    sst = np.sum((true - true.mean(axis=0)) ** 2, axis=0)
    return float(np.mean(1.0 - sse / sst))
