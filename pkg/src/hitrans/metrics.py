"""Confusion matrices and the macro-F1 / WA / UWA measures."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, UndefinedMetricError

MASKED = -1


class ConfusionMatrix:
    """Integer counts, rows = gold class, columns = predicted class."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ContractError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ContractError("confusion counts must be non-negative")
        self.counts = counts

    @classmethod
    def zeros(cls, n_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def tolist(self) -> list[list[int]]:
        return self.counts.tolist()


def confusion(preds: Sequence[int], golds: Sequence[int], n_classes: int) -> ConfusionMatrix:
    """Count (gold, pred) pairs, skipping golds equal to ``MASKED``."""
    if len(preds) != len(golds):
        raise ContractError(f"{len(preds)} predictions for {len(golds)} gold labels")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(preds, golds):
        if g == MASKED:
            continue
        cm[g, p] += 1
    return ConfusionMatrix(cm)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 counts as 0
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    precision = _ratio(tp, c.sum(axis=0))
    recall = _ratio(tp, c.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1, "support": c.sum(axis=1)}


def macro_f1(cm: ConfusionMatrix) -> float:
    return float(per_class(cm)["f1"].mean())


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise UndefinedMetricError("accuracy is undefined on an empty confusion matrix")


def wa(cm: ConfusionMatrix) -> float:
    """Class-share-weighted mean recall.

    Each term (n_c / N) * (tp_c / n_c) reduces to tp_c / N, so the sum is
    taken over integer counts and equals trace / total exactly.
    """
    _require_nonempty(cm)
    return int(np.trace(cm.counts)) / cm.total


def uwa(cm: ConfusionMatrix, present_only: bool = False) -> float:
    """Unweighted mean recall over all classes, or gold-present classes only."""
    _require_nonempty(cm)
    stats = per_class(cm)
    recall = stats["recall"]
    if present_only:
        recall = recall[stats["support"] > 0]
    return float(recall.mean())


def report(cm: ConfusionMatrix, label_set: Sequence[str], masked: int = 0,
           present_only_uwa: bool = False) -> dict:
    stats = per_class(cm)
    classes = {
        name: {k: float(stats[k][i]) for k in ("precision", "recall", "f1")} | {"support": int(stats["support"][i])}
        for i, name in enumerate(label_set)
    }
    empty = cm.total == 0
    return {
        "labels": list(label_set),
        "per_class": classes,
        "confusion": cm.tolist(),
        "macro_f1": macro_f1(cm),
        "wa": None if empty else wa(cm),
        "uwa": None if empty else uwa(cm, present_only_uwa),
        "evaluated": cm.total,
        "masked": masked,
    }
