"""Confusion matrices and classification reports.

Convention: confusion rows are true classes, columns are predicted classes.
Precision/recall/F1 define 0/0 as 0.  Macro averages are unweighted means
over classes.  Binary decisions use p >= threshold -> class 1; multi-class
decisions take the argmax with ties going to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [k, k] int64, rows = true, cols = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true: np.ndarray, y_pred: np.ndarray,
              num_classes: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise DimensionError(
            f"confusion expects matching 1-D label arrays, got "
            f"{y_true.shape} and {y_pred.shape}"
        )
    if num_classes < 1:
        raise DataError(f"num_classes must be >= 1, got {num_classes}")
    for what, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(
                f"{what} labels out of range [0, {num_classes}): "
                f"min={arr.min()}, max={arr.max()}"
            )
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts=counts)


def classify_threshold(y_hat: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Map model outputs [n, k] to class indices.

    Single-column outputs are binary probabilities of class 1 and use the
    threshold (inclusive).  Multi-column outputs take the row argmax.
    """
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must lie in (0, 1), got {threshold}")
    if y_hat.ndim != 2 or y_hat.shape[1] < 1:
        raise DimensionError(
            f"classify_threshold expects [n, k] scores, got {y_hat.shape}"
        )
    if y_hat.shape[1] == 1:
        return (y_hat[:, 0] >= threshold).astype(np.int64)
    return y_hat.argmax(axis=1).astype(np.int64)


@dataclass
class MetricsReport:
    class_names: list
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    cm: ConfusionMatrix

    def to_csv_text(self) -> str:
        """Metrics table then confusion matrix, separated by a blank line."""
        lines = ["name,precision,recall,f1,support"]
        for i, name in enumerate(self.class_names):
            lines.append(
                f"{name},{self.precision[i]:.6f},{self.recall[i]:.6f},"
                f"{self.f1[i]:.6f},{self.support[i]}"
            )
        lines.append(
            f"macro,{self.macro_precision:.6f},{self.macro_recall:.6f},"
            f"{self.macro_f1:.6f},{int(self.support.sum())}"
        )
        lines.append(f"accuracy,{self.accuracy:.6f},,,{self.cm.total}")
        lines.append("")
        lines.append("confusion," + ",".join(f"pred_{n}" for n in self.class_names))
        for i, name in enumerate(self.class_names):
            row = ",".join(str(int(v)) for v in self.cm.counts[i])
            lines.append(f"true_{name},{row}")
        return "\n".join(lines) + "\n"

    def to_text_table(self) -> str:
        """Aligned, human-readable report with the confusion matrix."""
        name_w = max(12, max(len(n) for n in self.class_names) + 2)
        head = (f"{'class':<{name_w}}{'precision':>10}{'recall':>10}"
                f"{'f1':>10}{'support':>10}")
        lines = [head, "-" * len(head)]
        for i, name in enumerate(self.class_names):
            lines.append(
                f"{name:<{name_w}}{self.precision[i]:>10.4f}"
                f"{self.recall[i]:>10.4f}{self.f1[i]:>10.4f}"
                f"{int(self.support[i]):>10}"
            )
        lines.append(
            f"{'macro':<{name_w}}{self.macro_precision:>10.4f}"
            f"{self.macro_recall:>10.4f}{self.macro_f1:>10.4f}"
            f"{int(self.support.sum()):>10}"
        )
        lines.append("")
        lines.append(f"accuracy: {self.accuracy:.4f} ({self.cm.total} samples)")
        lines.append("")
        lines.append("confusion matrix (rows = true, cols = predicted):")
        col_w = max(8, max(len(n) for n in self.class_names) + 2)
        lines.append(" " * name_w + "".join(f"{n:>{col_w}}" for n in self.class_names))
        for i, name in enumerate(self.class_names):
            row = "".join(f"{int(v):>{col_w}}" for v in self.cm.counts[i])
            lines.append(f"{name:<{name_w}}{row}")
        return "\n".join(lines) + "\n"


def report(cm: ConfusionMatrix, class_names: list | None = None) -> MetricsReport:
    """Per-class precision/recall/F1 with macro averages and accuracy."""
    k = cm.num_classes
    if cm.total == 0:
        raise DataError("cannot report metrics for an empty confusion matrix")
    if class_names is None:
        class_names = [f"class{i}" for i in range(k)]
    if len(class_names) != k:
        raise DimensionError(
            f"{len(class_names)} class names for a {k}x{k} confusion matrix"
        )
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    pred_totals = counts.sum(axis=0)
    true_totals = counts.sum(axis=1)

    def safe_div(num, den):
        out = np.zeros_like(num)
        nz = den > 0
        out[nz] = num[nz] / den[nz]
        return out

    precision = safe_div(tp, pred_totals)
    recall = safe_div(tp, true_totals)
    f1 = safe_div(2.0 * precision * recall, precision + recall)
    return MetricsReport(
        class_names=list(class_names),
        precision=precision,
        recall=recall,
        f1=f1,
        support=cm.counts.sum(axis=1),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        accuracy=float(tp.sum() / cm.total),
        cm=cm,
    )
