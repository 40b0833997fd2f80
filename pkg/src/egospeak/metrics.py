"""Confusion-count metrics with child (label 1) as the positive class."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

METRIC_NAMES = ("acc", "macro_f1", "recall", "specificity")


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class FoldMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    warnings: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def acc(self) -> float:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def f1_child(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def f1_adult(self) -> float:
        return _ratio(2 * self.tn, 2 * self.tn + self.fn + self.fp)

    @property
    def macro_f1(self) -> float:
        return (self.f1_child + self.f1_adult) / 2.0

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRIC_NAMES}


def compute_metrics(preds: Sequence[int], labels: Sequence[int]) -> FoldMetrics:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(preds) != len(labels):
        raise ValueError(f"preds and labels differ in length ({len(preds)} vs {len(labels)})")
    if len(labels) == 0:
        raise ValueError("cannot compute metrics on empty input")
    if not (np.isin(labels, (0, 1)).all() and np.isin(preds, (0, 1)).all()):
        raise ValueError("labels and predictions must be 0 (adult) or 1 (child)")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    warnings = []
    if tp + fn == 0:
        warnings.append("no child labels: child F1 and recall set to 0")
    if tn + fp == 0:
        warnings.append("no adult labels: adult F1 and specificity set to 0")
    return FoldMetrics(tp, fp, tn, fn, tuple(warnings))


@dataclass
class MetricsReport:
    """Per-fold metrics and their unweighted mean."""

    folds: list[FoldMetrics] = field(default_factory=list)

    def mean(self) -> dict[str, float]:
        if not self.folds:
            raise ValueError("no folds to average")
        return {m: float(np.mean([getattr(f, m) for f in self.folds])) for m in METRIC_NAMES}
