"""Classification metrics and their CSV/JSON renderings.

Key points:
- Top-k ranks classes by descending probability with a stable sort, so ties
  go to the lowest class index. ``k`` is capped at the class count.
- Loss is the mean per-sample cross-entropy with probabilities clamped to
  ``PROB_FLOOR``; the per-sample terms are summed with `math.fsum` so the
  result does not depend on evaluation order.
- Precision, recall, F1 and the confusion matrix come from scikit-learn with
  ``zero_division=0``. Macro averages cover the classes that occur in the
  labels or in the predictions.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from .const import PROB_FLOOR, TOP_K
from .errors import CorpusError, DimensionError

_LOGGER = logging.getLogger(__name__)


@dataclass(slots=True)
class MetricsReport:
    num_samples: int
    top1: float
    top3: float
    loss: float
    class_names: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray
    members: list[dict[str, Any]] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def summary(self) -> dict[str, Any]:
        """Scalar metrics only."""
        return {
            "num_samples": self.num_samples,
            "top1": self.top1,
            "top3": self.top3,
            "loss": self.loss,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }

    def to_dict(self) -> dict[str, Any]:
        document = self.summary()
        document["per_class"] = [
            {
                "class": name,
                "precision": self.precision[i],
                "recall": self.recall[i],
                "f1": self.f1[i],
                "support": self.support[i],
            }
            for i, name in enumerate(self.class_names)
        ]
        document["confusion_matrix"] = self.confusion.astype(int).tolist()
        if self.members:
            losses = [m["loss"] for m in self.members]
            document["members"] = self.members
            document["member_loss_mean"] = math.fsum(losses) / len(losses)
            document["member_loss_min"] = min(losses)
        return document


def top_k_hits(probs: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask: label among the ``k`` highest-ranked classes."""

    k = min(k, probs.shape[1])
    ranked = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (ranked == labels[:, None]).any(axis=1)


def predictions(probs: np.ndarray) -> np.ndarray:
    """Arg-max with the lowest index winning ties."""
    return np.argsort(-probs, axis=1, kind="stable")[:, 0]


def per_sample_loss(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    return -np.log(np.maximum(picked, PROB_FLOOR))


def mean_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return math.fsum(per_sample_loss(probs, labels).tolist()) / len(labels)


def _check_inputs(probs: np.ndarray, labels: np.ndarray) -> None:
    if probs.ndim != 2:
        raise DimensionError(f"expected (N, K) probabilities, got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise DimensionError(
            f"labels shape {labels.shape} does not match {probs.shape[0]} rows"
        )
    if len(labels) == 0:
        raise CorpusError("cannot evaluate an empty test set")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise DimensionError(
            f"labels must lie in [0, {probs.shape[1]}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )


def compute_metrics(
    probs: np.ndarray,
    labels: np.ndarray,
    class_names: Sequence[str] | None = None,
    *,
    k: int = TOP_K,
) -> MetricsReport:
    """Evaluate probability rows against integer labels."""

    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(probs, labels)
    num_classes = probs.shape[1]
    names = (
        list(class_names)
        if class_names is not None
        else [str(i) for i in range(num_classes)]
    )
    if len(names) != num_classes:
        raise DimensionError(
            f"{len(names)} class names given for {num_classes} probability columns"
        )

    predicted = predictions(probs)
    all_classes = list(range(num_classes))
    precision, recall, f1, support = precision_recall_fscore_support(
        labels, predicted, labels=all_classes, zero_division=0
    )
    cm = confusion_matrix(labels, predicted, labels=all_classes)
    present = (support > 0) | (cm.sum(axis=0) > 0)
    if not present.all():
        _LOGGER.debug(
            "%d class(es) absent from labels and predictions", int((~present).sum())
        )

    count = len(labels)
    return MetricsReport(
        num_samples=count,
        top1=float(np.count_nonzero(predicted == labels)) / count,
        top3=float(np.count_nonzero(top_k_hits(probs, labels, k))) / count,
        loss=mean_loss(probs, labels),
        class_names=names,
        precision=[float(v) for v in precision],
        recall=[float(v) for v in recall],
        f1=[float(v) for v in f1],
        support=[int(v) for v in support],
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        confusion=cm.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# CSV renderings
# ---------------------------------------------------------------------------
def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def per_class_csv(report: MetricsReport) -> str:
    rows = [
        (
            name,
            repr(report.precision[i]),
            repr(report.recall[i]),
            repr(report.f1[i]),
            report.support[i],
        )
        for i, name in enumerate(report.class_names)
    ]
    return _csv_text(("class", "precision", "recall", "f1", "support"), rows)


def confusion_csv(report: MetricsReport) -> str:
    """Rows are true classes, columns predicted classes."""
    rows = [
        (name, *report.confusion[i].tolist())
        for i, name in enumerate(report.class_names)
    ]
    return _csv_text(("true\\predicted", *report.class_names), rows)


def curves_csv(curves: dict[str, list[Any]]) -> str:
    columns = list(curves)
    length = max((len(v) for v in curves.values()), default=0)
    rows = [
        tuple(curves[c][i] if i < len(curves[c]) else "" for c in columns)
        for i in range(length)
    ]
    return _csv_text(columns, rows)
