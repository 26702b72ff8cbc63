"""Classification and regression scores used to evaluate the QoE models."""

from __future__ import annotations

from typing import Hashable, Sequence

import numpy as np

from ..errors import DegenerateVarianceError, ShapeError


def _check(preds: Sequence, truth: Sequence) -> None:
    if len(preds) != len(truth):
        raise ShapeError(f"{len(preds)} predictions for {len(truth)} truth values")
    if len(truth) == 0:
        raise ShapeError("empty prediction set")


def accuracy(preds: Sequence[Hashable], truth: Sequence[Hashable]) -> float:
    _check(preds, truth)
    return sum(p == t for p, t in zip(preds, truth)) / len(truth)


def confusion_matrix(preds: Sequence[Hashable], truth: Sequence[Hashable],
                     labels: Sequence[Hashable]) -> np.ndarray:
    """Rows are true labels, columns predicted labels, both in ``labels`` order."""
    _check(preds, truth)
    index = {lab: i for i, lab in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(preds, truth):
        cm[index[t], index[p]] += 1
    return cm


def per_class_f1(preds: Sequence[Hashable], truth: Sequence[Hashable]) -> dict[Hashable, float]:
    _check(preds, truth)
    classes = sorted(set(preds) | set(truth))
    out = {}
    for c in classes:
        tp = sum(p == c and t == c for p, t in zip(preds, truth))
        fp = sum(p == c and t != c for p, t in zip(preds, truth))
        fn = sum(p != c and t == c for p, t in zip(preds, truth))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out[c] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return out


def micro_f1(preds: Sequence[Hashable], truth: Sequence[Hashable]) -> float:
    """F1 from pooled counts; for single-label multiclass data this is the accuracy."""
    _check(preds, truth)
    tp = sum(p == t for p, t in zip(preds, truth))
    wrong = len(truth) - tp  # each miss is one FP (predicted class) and one FN (true class)
    return 2 * tp / (2 * tp + 2 * wrong)


def macro_f1(preds: Sequence[Hashable], truth: Sequence[Hashable]) -> float:
    scores = per_class_f1(preds, truth)
    return float(sum(scores.values()) / len(scores))


def r2_score(truth: Sequence[float], preds: Sequence[float]) -> float:
    if len(truth) != len(preds):
        raise ShapeError(f"{len(preds)} predictions for {len(truth)} truth values")
    if len(truth) < 2:
        raise ShapeError("r2_score needs at least 2 values")
    y = np.asarray(truth, dtype=float)
    yp = np.asarray(preds, dtype=float)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DegenerateVarianceError("truth has zero variance; R2 is undefined")
    return 1.0 - float(((y - yp) ** 2).sum()) / ss_tot


def r2_from_moments(variance: float, mse: float) -> float:
    """R2 from the truth variance and the prediction MSE (both per-sample averages)."""
    if variance <= 0:
        raise DegenerateVarianceError("truth variance must be positive")
    return 1.0 - mse / variance
