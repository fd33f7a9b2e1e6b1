"""Classification metrics: average precision, F1, accuracy.

Average precision is the interpolation-free form: precision evaluated at
each positive in the score-descending ranking, averaged over positives.
Ties in score are broken by ascending example index, which keeps every
metric deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


def average_precision(labels: np.ndarray, scores: np.ndarray) -> float:
    """AP for one class. Returns ``nan`` when the class has no positives."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=float)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise InvalidInputError(
            f"labels {labels.shape} and scores {scores.shape} must be equal-length vectors")
    n_pos = int(labels.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    cum_pos = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at_pos = cum_pos[ranked] / ranks[ranked]
    return float(precision_at_pos.sum() / n_pos)


def mean_average_precision(labels: np.ndarray, scores: np.ndarray) -> tuple[float, np.ndarray]:
    """mAP over classes with at least one positive.

    Args:
        labels: ``[N, C]`` multi-hot ground truth.
        scores: ``[N, C]`` real-valued scores.

    Returns:
        ``(mAP, per_class_ap)`` where classes without positives carry
        ``nan`` in ``per_class_ap`` and are excluded from the mean.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    if labels.shape != scores.shape or labels.ndim != 2:
        raise InvalidInputError(
            f"labels {labels.shape} and scores {scores.shape} must be matching [N, C]")
    per_class = np.array([average_precision(labels[:, c], scores[:, c])
                          for c in range(labels.shape[1])])
    valid = ~np.isnan(per_class)
    if not valid.any():
        raise InvalidInputError("no class has a positive example")
    return float(per_class[valid].mean()), per_class


def per_class_f1(labels: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary F1 per class at a fixed score threshold (0 when undefined)."""
    labels = np.asarray(labels).astype(bool)
    pred = np.asarray(scores) >= threshold
    tp = (pred & labels).sum(axis=0).astype(float)
    fp = (pred & ~labels).sum(axis=0).astype(float)
    fn = (~pred & labels).sum(axis=0).astype(float)
    denom = 2 * tp + fp + fn
    out = np.zeros(labels.shape[1])
    nz = denom > 0
    out[nz] = 2 * tp[nz] / denom[nz]
    return out


def top1_accuracy(labels: np.ndarray, scores: np.ndarray) -> float:
    """Fraction of rows whose highest-scoring class is a true label.

    Score ties resolve to the lowest class index.
    """
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores)
    pred = scores.argmax(axis=1)
    return float(labels[np.arange(len(pred)), pred].mean())


@dataclass
class MetricsReport:
    """Evaluation summary for one split."""

    map: float
    accuracy: float
    per_class_ap: np.ndarray
    per_class_f1: np.ndarray
    threshold: float
    num_examples: int

    def to_dict(self) -> dict:
        return {
            "mAP": self.map,
            "accuracy": self.accuracy,
            "per_class_AP": [None if np.isnan(v) else float(v) for v in self.per_class_ap],
            "per_class_F1": [float(v) for v in self.per_class_f1],
            "threshold": self.threshold,
            "num_examples": self.num_examples,
        }


def compute_metrics(labels: np.ndarray, scores: np.ndarray,
                    threshold: float = 0.5) -> MetricsReport:
    """All metrics in one pass over an ``[N, C]`` label/score pair."""
    m, per_ap = mean_average_precision(labels, scores)
    return MetricsReport(
        map=m,
        accuracy=top1_accuracy(labels, scores),
        per_class_ap=per_ap,
        per_class_f1=per_class_f1(labels, scores, threshold),
        threshold=threshold,
        num_examples=labels.shape[0],
    )
