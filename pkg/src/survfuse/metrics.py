"""Classification metrics: accuracy, one-vs-rest precision/recall with
macro averaging, and the F-score 2PR/(P+R) computed from the macro values.

Zero-denominator precision or recall is defined as 0 and flagged in the
result so degenerate folds are visible in reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

N_CLASSES = 3


@dataclass
class FoldMetrics:
    accuracy: float
    precision: float
    recall: float
    f_score: float
    per_class: dict
    confusion: np.ndarray  # confusion[true, pred]
    zero_division: bool
    n: int

    def as_row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
        }


def confusion_matrix(preds, labels, k: int = N_CLASSES) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(preds, labels):
        m[int(t), int(p)] += 1
    return m


def metrics_from_confusion(confusion: np.ndarray) -> FoldMetrics:
    confusion = np.asarray(confusion, dtype=np.int64)
    k = confusion.shape[0]
    total = int(confusion.sum())
    if total == 0:
        raise ValidationError("metrics: empty confusion matrix")
    accuracy = float(np.trace(confusion)) / total

    per_class = {}
    zero_division = False
    precisions, recalls = [], []
    for c in range(k):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum()) - tp
        fn = int(confusion[c, :].sum()) - tp
        if tp + fp == 0:
            precision = 0.0
            zero_division = True
        else:
            precision = tp / (tp + fp)
        if tp + fn == 0:
            recall = 0.0
            zero_division = True
        else:
            recall = tp / (tp + fn)
        per_class[c] = {"tp": tp, "fp": fp, "fn": fn, "precision": precision, "recall": recall}
        precisions.append(precision)
        recalls.append(recall)

    macro_p = float(np.mean(precisions))
    macro_r = float(np.mean(recalls))
    if macro_p + macro_r == 0:
        f_score = 0.0
        zero_division = True
    else:
        f_score = 2.0 * macro_p * macro_r / (macro_p + macro_r)
    return FoldMetrics(
        accuracy=accuracy,
        precision=macro_p,
        recall=macro_r,
        f_score=f_score,
        per_class=per_class,
        confusion=confusion,
        zero_division=zero_division,
        n=total,
    )


def evaluate(preds, labels) -> FoldMetrics:
    """Metrics for one prediction set; order of pairs is irrelevant."""
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ValidationError(f"evaluate: {len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValidationError("evaluate: empty prediction list")
    return metrics_from_confusion(confusion_matrix(preds, labels))


@dataclass
class MetricsReport:
    """Per-fold metrics plus their mean and (sample) standard deviation."""

    folds: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    confusion_total: np.ndarray | None = None


def aggregate(folds) -> MetricsReport:
    folds = list(folds)
    if not folds:
        raise ValidationError("aggregate: no fold metrics")
    keys = ("accuracy", "precision", "recall", "f_score")
    values = {k: np.array([getattr(f, k) for f in folds], dtype=np.float64) for k in keys}
    mean = {k: float(v.mean()) for k, v in values.items()}
    std = {k: float(v.std(ddof=1)) if len(folds) > 1 else 0.0 for k, v in values.items()}
    confusion_total = np.sum([f.confusion for f in folds], axis=0)
    return MetricsReport(folds=folds, mean=mean, std=std, confusion_total=confusion_total)
