"""Long-tailed evaluation: confusion matrix, subset accuracies, macro F1."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Subset
from .errors import InvalidArgumentError, ReportError


def confusion(preds, labels, num_classes: int) -> np.ndarray:
    """C x C count matrix; entry (i, j) = true class i predicted as j."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise InvalidArgumentError("preds and labels must be 1-D and equally long")
    if len(preds) and (
        preds.min() < 0 or labels.min() < 0
        or preds.max() >= num_classes or labels.max() >= num_classes
    ):
        raise InvalidArgumentError(f"class index out of range for C={num_classes}")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, preds), 1)
    return matrix


@dataclass
class EvalReport:
    confusion: np.ndarray
    overall_acc: float
    per_class_acc: list[float]
    subset_acc: dict[str, float | None]
    macro_f1: float


def report(matrix: np.ndarray, subsets: list[Subset]) -> EvalReport:
    """Aggregate a confusion matrix into the standard long-tailed metrics.

    Requires every class to appear in the test set (balanced-test protocol);
    per-class F1 is defined as 0 when precision + recall is 0.
    """
    matrix = np.asarray(matrix, dtype=np.int64)
    num_classes = matrix.shape[0]
    if matrix.shape != (num_classes, num_classes):
        raise ReportError("confusion matrix must be square")
    if len(subsets) != num_classes:
        raise ReportError("subset assignment must cover every class")
    row_sums = matrix.sum(axis=1)
    if (row_sums == 0).any():
        missing = int(np.flatnonzero(row_sums == 0)[0])
        raise ReportError(f"class {missing} has no test samples")

    diag = np.diag(matrix).astype(np.float64)
    col_sums = matrix.sum(axis=0)
    recall = diag / row_sums
    precision = np.divide(diag, col_sums, out=np.zeros(num_classes), where=col_sums > 0)
    pr_sum = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr_sum, out=np.zeros(num_classes), where=pr_sum > 0)

    subset_acc: dict[str, float | None] = {}
    for bucket in Subset:
        members = [c for c in range(num_classes) if subsets[c] == bucket]
        subset_acc[bucket.value] = float(np.mean(recall[members])) if members else None

    return EvalReport(
        confusion=matrix,
        overall_acc=float(diag.sum() / matrix.sum()),
        per_class_acc=[float(r) for r in recall],
        subset_acc=subset_acc,
        macro_f1=float(f1.mean()),
    )


def report_to_dict(rep: EvalReport) -> dict:
    return {
        "overall_acc": rep.overall_acc,
        "macro_f1": rep.macro_f1,
        "per_class_acc": rep.per_class_acc,
        "subset_acc": {
            "many": rep.subset_acc.get("many"),
            "medium": rep.subset_acc.get("medium"),
            "few": rep.subset_acc.get("few"),
        },
        "confusion": rep.confusion.tolist(),
    }


def write_report(path, rep: EvalReport) -> None:
    Path(path).write_text(
        json.dumps(report_to_dict(rep), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
