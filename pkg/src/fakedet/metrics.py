"""Confusion-matrix evaluation: accuracy, precision, recall, F1.

The positive class is "fake" (label 1) throughout. Thresholding is
predicted-fake iff probability >= threshold, so an exact 0.5 counts as
fake. Degenerate denominators (no predicted positives, no actual
positives, or precision+recall both zero) yield 0 with the metric name
recorded in the report's ``degenerate`` set instead of raising.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: ConfusionMatrix
    degenerate: frozenset[str]


def _as_1d(values) -> np.ndarray:
    if isinstance(values, Tensor):
        values = values.data
    arr = np.asarray(values)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"expected a [B] or [B, 1] array, got shape {arr.shape}")
    return arr


def confusion(probs, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally TP/TN/FP/FN with fake (label 1) as the positive class."""
    p = _as_1d(probs)
    y = _as_1d(labels)
    if p.shape != y.shape:
        raise ValueError(f"probs {p.shape} and labels {y.shape} disagree")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    pred = p >= threshold
    actual = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & actual)),
        tn=int(np.sum(~pred & ~actual)),
        fp=int(np.sum(pred & ~actual)),
        fn=int(np.sum(~pred & actual)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def precision(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fp == 0:
        return 0.0
    return cm.tp / (cm.tp + cm.fp)


def recall(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0:
        return 0.0
    return cm.tp / (cm.tp + cm.fn)


def f1(cm: ConfusionMatrix) -> float:
    p, r = precision(cm), recall(cm)
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r)


def degenerate_metrics(cm: ConfusionMatrix) -> frozenset[str]:
    out = set()
    if cm.tp + cm.fp == 0:
        out.add("precision")
    if cm.tp + cm.fn == 0:
        out.add("recall")
    if precision(cm) + recall(cm) == 0:
        out.add("f1")
    return frozenset(out)


def report(cm: ConfusionMatrix) -> MetricsReport:
    return MetricsReport(
        accuracy=accuracy(cm),
        precision=precision(cm),
        recall=recall(cm),
        f1=f1(cm),
        confusion=cm,
        degenerate=degenerate_metrics(cm),
    )


# ---- serialization -------------------------------------------------------

METRICS_HEADER = ("model", "accuracy", "precision", "recall", "f1",
                  "tp", "tn", "fp", "fn")


def write_metrics_csv(path, rows: list[tuple[str, MetricsReport]]) -> None:
    """One row per model: name, the four metrics (6 decimals), raw counts."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for name, rep in rows:
            cm = rep.confusion
            w.writerow([name, f"{rep.accuracy:.6f}", f"{rep.precision:.6f}",
                        f"{rep.recall:.6f}", f"{rep.f1:.6f}",
                        cm.tp, cm.tn, cm.fp, cm.fn])


def write_confusion_csv(path, cm: ConfusionMatrix) -> None:
    """2x2 grid, rows = actual fake/real, columns = predicted fake/real."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["", "pred_fake", "pred_real"])
        w.writerow(["actual_fake", cm.tp, cm.fn])
        w.writerow(["actual_real", cm.fp, cm.tn])


def format_confusion(cm: ConfusionMatrix) -> str:
    """Plain-text grid for terminal output."""
    width = max(9, len(str(max(cm.tp, cm.tn, cm.fp, cm.fn))))
    rows = [
        f"{'':>12s} {'pred_fake':>{width}s} {'pred_real':>{width}s}",
        f"{'actual_fake':>12s} {cm.tp:>{width}d} {cm.fn:>{width}d}",
        f"{'actual_real':>12s} {cm.fp:>{width}d} {cm.tn:>{width}d}",
    ]
    return "\n".join(rows)
