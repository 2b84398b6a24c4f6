"""Confusion-matrix accumulation, per-class IoU and mIoU."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .catalog import ClassCatalog
from .errors import ContractError

DEFAULT_EXCLUDED = frozenset({0})


class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels of true class ``t`` predicted as ``p``."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ContractError("confusion counts must be a nonnegative C x C matrix")
        self.counts = counts

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix(num_classes={self.num_classes}, total={self.total})"

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred, truth) -> "ConfusionMatrix":
        """Add one prediction/truth pair in place."""
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ContractError(f"pred {pred.shape} and truth {truth.shape} differ")
        n = self.num_classes
        for name, arr in (("pred", pred), ("truth", truth)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ContractError(f"{name} labels outside 0..{n - 1}")
        flat = truth.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
        return self

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def accumulate(conf: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    return conf.copy().update(pred, truth)


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise ContractError(f"cannot merge {a.num_classes}- and {b.num_classes}-class matrices")
    return ConfusionMatrix(a.num_classes, a.counts + b.counts)


def per_class_iou(conf: ConfusionMatrix) -> np.ndarray:
    """``TP / (TP + FP + FN)`` per class; NaN where the class never occurs."""
    tp = np.diag(conf.counts).astype(np.float64)
    fp = conf.counts.sum(axis=0) - tp
    fn = conf.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def mean_iou(ious: Sequence[float | None], excluded: Iterable[int] = DEFAULT_EXCLUDED) -> float:
    """Mean IoU over classes that are neither excluded nor undefined (NaN/None)."""
    excluded = set(excluded)
    kept = [float(v) for c, v in enumerate(ious)
            if c not in excluded and v is not None and not math.isnan(v)]
    if not kept:
        raise ContractError("no defined, non-excluded classes to average")
    return sum(kept) / len(kept)


@dataclass
class MetricsReport:
    per_class_iou: list  # float in [0, 1] or None when undefined
    class_names: list[str]
    miou: float
    excluded_class_ids: list[int] = field(default_factory=lambda: sorted(DEFAULT_EXCLUDED))
    pixels_scored: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_class_iou = [None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)
                              for v in self.per_class_iou]
        if len(self.per_class_iou) != len(self.class_names):
            raise ContractError("per_class_iou and class_names lengths differ")
        self.excluded_class_ids = sorted(int(c) for c in self.excluded_class_ids)

    @property
    def name(self) -> str:
        return str(self.metadata.get("model", "model"))

    @classmethod
    def from_confusion(cls, conf: ConfusionMatrix, catalog: ClassCatalog | None = None,
                       excluded: Iterable[int] = DEFAULT_EXCLUDED, **metadata) -> "MetricsReport":
        catalog = catalog or ClassCatalog.default()
        if catalog.num_classes != conf.num_classes:
            raise ContractError("catalog and confusion matrix disagree on class count")
        ious = per_class_iou(conf)
        excluded = sorted(excluded)
        return cls(ious.tolist(), catalog.names, mean_iou(ious, excluded), excluded, conf.total, metadata)

    @classmethod
    def from_ious(cls, ious: Sequence[float | None], class_names: Sequence[str],
                  excluded: Iterable[int] = DEFAULT_EXCLUDED, **metadata) -> "MetricsReport":
        """Report built from known IoU values, e.g. published table rows."""
        excluded = sorted(excluded)
        return cls(list(ious), list(class_names), mean_iou(ious, excluded), excluded, 0, metadata)

    def iou_by_name(self) -> dict:
        return dict(zip(self.class_names, self.per_class_iou))

    def scored_classes(self) -> list[int]:
        return [c for c in range(len(self.class_names)) if c not in self.excluded_class_ids]
