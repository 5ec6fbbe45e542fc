"""Confusion-matrix classification metrics with weighted and macro averaging.

Per-class scores are computed as exact rationals and converted to float at
the end, so algebraic identities (weighted recall == accuracy) hold exactly
on integer counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C counts; rows are true classes, columns predictions."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(labels, predictions, num_classes: int) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape or labels.ndim != 1:
        raise ValueError(f"labels and predictions must be equal-length 1-d sequences, "
                         f"got {labels.shape} vs {predictions.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes
                        or predictions.min() < 0 or predictions.max() >= num_classes):
        raise ValueError("class value outside [0, num_classes)")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    counts.setflags(write=False)
    return ConfusionMatrix(counts)


def _per_class(cm: ConfusionMatrix):
    """Per-class (precision, recall, f1, support) as Fractions; 0/0 -> 0."""
    c = cm.counts
    rows = []
    for k in range(cm.num_classes):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
        rows.append((p, r, f1, tp + fn))
    return rows


def weighted_scores(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """Support-weighted (f1, precision, recall).

    Classes with zero support contribute zero weight, so they never produce
    NaNs and never dilute the average.
    """
    if cm.total == 0:
        raise ValueError("metrics on an all-zero confusion matrix")
    per = _per_class(cm)
    n = sum(s for *_, s in per)
    f1 = sum(f * s for _, _, f, s in per) / n
    p = sum(p * s for p, _, _, s in per) / n
    r = sum(r * s for _, r, _, s in per) / n
    return float(f1), float(p), float(r)


def macro_scores(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """Unweighted mean of per-class (f1, precision, recall) over classes with
    nonzero support (keeps padding classes, e.g. a never-true negative class,
    out of the average)."""
    if cm.total == 0:
        raise ValueError("metrics on an all-zero confusion matrix")
    per = [row for row in _per_class(cm) if row[3] > 0]
    k = len(per)
    f1 = sum(f for _, _, f, _ in per) / k
    p = sum(p for p, _, _, _ in per) / k
    r = sum(r for _, r, _, _ in per) / k
    return float(f1), float(p), float(r)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy on an all-zero confusion matrix")
    return float(Fraction(int(np.trace(cm.counts)), cm.total))
