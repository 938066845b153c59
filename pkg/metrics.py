"""
Relation classification metrics: accuracy, per-class recall, mAP, plus AUC
for the contrastive scene task.

Tie rules (also echoed into every report header):
  - argmax ties go to the lowest class index
  - AP ranks samples by descending score, ties kept in input order
  - AUC counts tied positive/negative pairs as 1/2
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, NumericError

logger = logging.getLogger(__name__)

TIE_RULES = (
    "argmax ties -> lowest class index; "
    "AP ranking ties -> input order (stable), non-interpolated; "
    "AUC ties -> 1/2"
)


@dataclass
class ScoredPrediction:
    true_class: int
    scores: np.ndarray  # (C,)


def stack_predictions(predictions: Sequence[ScoredPrediction]) -> Tuple[np.ndarray, np.ndarray]:
    if not predictions:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    scores = np.stack([np.asarray(p.scores, dtype=np.float64) for p in predictions])
    labels = np.asarray([p.true_class for p in predictions], dtype=np.int64)
    return scores, labels


def _check(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} do not line up")
    if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise DataError(f"true class outside 0..{scores.shape[1] - 1}")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores contain non-finite values")
    return scores, labels


def predicted_classes(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index
    return np.argmax(np.asarray(scores), axis=1)


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    scores, labels = _check(scores, labels)
    if labels.size == 0:
        raise DataError("accuracy of an empty prediction set")
    return float(np.mean(predicted_classes(scores) == labels))


def per_class_recall(scores: np.ndarray, labels: np.ndarray) -> List[Optional[float]]:
    """Recall per class; None marks a class with no samples."""
    scores, labels = _check(scores, labels)
    predicted = predicted_classes(scores) if labels.size else labels
    recalls: List[Optional[float]] = []
    for c in range(scores.shape[1]):
        mask = labels == c
        total = int(mask.sum())
        recalls.append(float((predicted[mask] == c).sum()) / total if total else None)
    return recalls


def average_precision(class_scores: np.ndarray, positives: np.ndarray) -> float:
    """Non-interpolated AP: mean of precision at each positive hit."""
    class_scores = np.asarray(class_scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise DataError("average precision needs at least one positive")
    order = np.argsort(-class_scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hits.mean())


def per_class_average_precision(scores: np.ndarray, labels: np.ndarray) -> List[Optional[float]]:
    scores, labels = _check(scores, labels)
    aps: List[Optional[float]] = []
    for c in range(scores.shape[1]):
        positives = labels == c
        if not positives.any():
            logger.warning(f"⚠️ Class {c} has no positives; excluded from mAP")
            aps.append(None)
            continue
        aps.append(average_precision(scores[:, c], positives))
    return aps


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of per-class AP over classes that have positives."""
    defined = [ap for ap in per_class_average_precision(scores, labels) if ap is not None]
    if not defined:
        raise DataError("mAP undefined: no class has a positive sample")
    return float(np.mean(defined))


def auc(scores: np.ndarray, is_positive: np.ndarray) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    is_positive = np.asarray(is_positive, dtype=bool)
    pos = scores[is_positive]
    neg = np.sort(scores[~is_positive])
    if pos.size == 0 or neg.size == 0:
        raise DataError("AUC needs both positive and negative samples")
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (pos.size * neg.size))


def confusion_matrix(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    scores, labels = _check(scores, labels)
    C = scores.shape[1]
    matrix = np.zeros((C, C), dtype=np.int64)
    if labels.size:
        np.add.at(matrix, (labels, predicted_classes(scores)), 1)
    return matrix


def check_recall_identity(scores: np.ndarray, labels: np.ndarray, tolerance: float = 1e-12) -> float:
    """Accuracy must equal the class-frequency-weighted mean of per-class recall."""
    scores, labels = _check(scores, labels)
    acc = accuracy(scores, labels)
    freqs = np.bincount(labels, minlength=scores.shape[1]) / labels.size
    recalls = per_class_recall(scores, labels)
    weighted = float(sum(f * r for f, r in zip(freqs, recalls) if r is not None))
    if abs(acc - weighted) > tolerance:
        raise NumericError("accuracy/recall identity violated", {"accuracy": acc, "weighted_recall": weighted})
    return weighted


def majority_baseline(train_labels: np.ndarray, test_labels: np.ndarray, n_classes: int) -> Tuple[int, float]:
    """Majority class of the training labels and its accuracy on the test labels."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if test_labels.size == 0:
        raise DataError("majority baseline of an empty test set")
    counts = np.bincount(train_labels, minlength=n_classes) if train_labels.size else np.zeros(n_classes)
    majority = int(np.argmax(counts))
    return majority, float(np.mean(test_labels == majority))


def coarsen_predictions(
    scores: np.ndarray, labels: np.ndarray, coarse_map: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Fine -> coarse: coarse scores are the summed fine probabilities."""
    scores, labels = _check(scores, labels)
    coarse_map = np.asarray(coarse_map, dtype=np.int64)
    if coarse_map.shape != (scores.shape[1],):
        raise DataError(f"coarse map has {coarse_map.size} entries for {scores.shape[1]} classes")
    n_coarse = int(coarse_map.max()) + 1
    coarse_scores = np.zeros((scores.shape[0], n_coarse))
    for fine, coarse in enumerate(coarse_map):
        coarse_scores[:, coarse] += scores[:, fine]
    return coarse_scores, coarse_map[labels]
