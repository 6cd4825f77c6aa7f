"""Thresholded average precision and its micro/macro averages.

A score counts as a positive prediction when ``score >= t``. Precision with no
predictions is 1 and recall with no positives is 0. Average precision walks
the threshold grid from the highest threshold down and sums recall increments
weighted by the precision reached at each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, NoPositives, ShapeMismatch


@dataclass(frozen=True)
class ThresholdGrid:
    count: int = 500

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("a threshold grid needs at least two points")

    @property
    def values(self) -> np.ndarray:
        # i / (count - 1) rounded once, so any other evaluator can reproduce them bit for bit
        return np.arange(self.count, dtype=np.float64) / (self.count - 1)


@dataclass
class PredictionSet:
    scores: np.ndarray
    labels: np.ndarray
    provenance: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ShapeMismatch(f"{self.scores.size} scores vs {self.labels.size} labels")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise ValueError("scores must lie in [0, 1]")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")
        self.labels = self.labels.astype(np.int64)


def _counts(preds: PredictionSet, thresholds: np.ndarray):
    """True and false positive counts for each threshold."""
    order = np.sort(preds.scores)
    pos_sorted = np.sort(preds.scores[preds.labels == 1])
    # number of scores >= t == n - (number of scores < t)
    predicted = order.size - np.searchsorted(order, thresholds, side="left")
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="left")
    return tp, predicted - tp


def precision_recall_at(preds: PredictionSet, t: float) -> tuple[float, float]:
    if preds.scores.size == 0:
        raise EmptyInput("no predictions to evaluate")
    tp, fp = (int(v[0]) for v in _counts(preds, np.array([t], dtype=np.float64)))
    positives = int(preds.labels.sum())
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 0.0 if positives == 0 else tp / positives
    return precision, recall


def precision_recall_curve(preds: PredictionSet, grid: ThresholdGrid = ThresholdGrid()):
    """Precision and recall at every grid threshold, ordered from high to low threshold."""
    if preds.scores.size == 0:
        raise EmptyInput("no predictions to evaluate")
    thresholds = grid.values[::-1]
    tp, fp = _counts(preds, thresholds)
    positives = int(preds.labels.sum())
    predicted = tp + fp
    precision = np.where(predicted == 0, 1.0, tp / np.maximum(predicted, 1))
    recall = tp / positives if positives else np.zeros_like(tp, dtype=np.float64)
    return thresholds, precision, recall


def average_precision(preds: PredictionSet, grid: ThresholdGrid = ThresholdGrid()) -> float:
    if preds.scores.size == 0:
        raise EmptyInput("no predictions to evaluate")
    if not preds.labels.any():
        raise NoPositives("average precision is undefined without positive labels")
    _, precision, recall = precision_recall_curve(preds, grid)
    steps = np.diff(recall, prepend=0.0)
    # cumsum adds strictly left to right, unlike np.sum's pairwise reduction
    return float(np.cumsum(steps * precision)[-1])


def mean_average_precision(all_scores, all_labels, grid: ThresholdGrid = ThresholdGrid(), mode: str = "micro") -> float:
    """Micro mode pools every (sample, label) pair; macro averages per-label AP.

    In macro mode labels without any positive are skipped.
    """
    scores = np.asarray(getattr(all_scores, "data", all_scores), dtype=np.float64)
    labels = np.asarray(getattr(all_labels, "data", all_labels))
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"scores {scores.shape} and labels {labels.shape} differ")
    if mode == "micro":
        return average_precision(PredictionSet(scores, labels), grid)
    if mode != "macro":
        raise ValueError(f"mode must be 'micro' or 'macro', got {mode!r}")
    if scores.ndim != 2:
        raise ShapeMismatch("macro mode needs (B, K) arrays")
    aps = [
        average_precision(PredictionSet(scores[:, k], labels[:, k]), grid)
        for k in range(scores.shape[1])
        if labels[:, k].any()
    ]
    if not aps:
        raise NoPositives("no label has a positive example")
    return float(np.mean(aps))


def per_label_average_precision(all_scores, all_labels, grid: ThresholdGrid = ThresholdGrid()) -> list:
    """AP for each label column, ``None`` where the column has no positives."""
    scores = np.asarray(all_scores, dtype=np.float64)
    labels = np.asarray(all_labels)
    out = []
    for k in range(scores.shape[1]):
        if labels[:, k].any():
            out.append(average_precision(PredictionSet(scores[:, k], labels[:, k]), grid))
        else:
            out.append(None)
    return out
