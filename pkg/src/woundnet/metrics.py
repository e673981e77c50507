"""Evaluation metrics and mask post-processing.

Conventions (fixed so tests are deterministic): any 0/0 metric denominator
maps to 0; Dice of two empty masks is 1. Segmentation precision/recall/F1
are pixel-pooled over a whole split, while dice_mean averages per image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    """The six reported fields: classification accuracy and macro-F1,
    per-image mean Dice, and pixel-pooled segmentation precision/recall/F1."""

    accuracy: float
    f1_classification: float
    dice_mean: float
    precision_seg: float
    recall_seg: float
    f1_seg: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def threshold_mask(prob_mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Probabilities -> binary mask; a pixel >= threshold maps to 1, else 0."""
    return (prob_mask >= threshold).astype(prob_mask.dtype)


def _check_binary(name: str, arr: np.ndarray) -> None:
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary (0/1)")


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Exact TP/FP/FN/TN pixel counts for two binary arrays of equal shape."""
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} != truth {truth.shape}")
    _check_binary("pred", pred)
    _check_binary("truth", truth)
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp, fp, fn, tn)


def accuracy(predicted_labels, true_labels) -> float:
    pred = np.asarray(predicted_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ShapeError(f"labels shape mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty label set is undefined")
    return int(np.count_nonzero(pred == true)) / pred.size


def precision_recall_f1(counts: ConfusionCounts):
    """-> (precision, recall, f1); 0/0 denominators yield 0 by convention."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """Overlap score 2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} != truth {truth.shape}")
    _check_binary("pred", pred)
    _check_binary("truth", truth)
    p = pred.astype(bool)
    t = truth.astype(bool)
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & t)) / denom


def macro_f1(predicted_labels, true_labels, num_classes: int = 4) -> float:
    """Unweighted mean of per-class one-vs-rest F1 scores."""
    pred = np.asarray(predicted_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ShapeError(f"labels shape mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("macro F1 of an empty label set is undefined")
    scores = []
    for c in range(num_classes):
        tp = int(np.count_nonzero((pred == c) & (true == c)))
        fp = int(np.count_nonzero((pred == c) & (true != c)))
        fn = int(np.count_nonzero((pred != c) & (true == c)))
        _, _, f1 = precision_recall_f1(ConfusionCounts(tp, fp, fn, 0))
        scores.append(f1)
    return float(np.mean(scores))
