"""Pixel-count metrics: confusion matrices, balanced accuracy, IoU, recall.

All reported numbers derive from exact integer counts accumulated over a
split (micro-averaging); undefined metrics raise instead of silently
returning zero, since silent zeros corrupt checkpoint selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


class UndefinedMetricError(ArithmeticError):
    """A metric's denominator is zero (class absent from the data)."""


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative count {name}")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other):
        """Component-wise integer addition (exact, order-independent)."""
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def confusion(pred, target):
    """Exact per-pixel counts for binary masks of equal shape."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    for name, arr in (("pred", pred), ("target", target)):
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"{name} mask contains non-binary entries {vals[:5]}")
    p = pred.astype(bool)
    t = target.astype(bool)
    return ConfusionMatrix(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def recall(cm, cls=1):
    if cls == 1:
        if cm.tp + cm.fn == 0:
            raise UndefinedMetricError("positive recall undefined: no positive pixels")
        return cm.tp / (cm.tp + cm.fn)
    if cm.tn + cm.fp == 0:
        raise UndefinedMetricError("negative recall undefined: no negative pixels")
    return cm.tn / (cm.tn + cm.fp)


def balanced_accuracy(cm):
    return 0.5 * (recall(cm, 1) + recall(cm, 0))


def iou(cm, cls=1):
    if cls == 1:
        denom = cm.tp + cm.fp + cm.fn
        if denom == 0:
            raise UndefinedMetricError("positive IoU undefined: empty union")
        return cm.tp / denom
    denom = cm.tn + cm.fn + cm.fp
    if denom == 0:
        raise UndefinedMetricError("negative IoU undefined: empty union")
    return cm.tn / denom


def segmentation_report(cm):
    """The reported metric set: balanced accuracy, per-class IoU and recall."""
    return {
        "balanced_accuracy": balanced_accuracy(cm),
        "iou_neg": iou(cm, 0),
        "iou_pos": iou(cm, 1),
        "recall_neg": recall(cm, 0),
        "recall_pos": recall(cm, 1),
    }


@dataclass
class SplitStats:
    images: int
    background_pixels: int
    target_pixels: int

    @property
    def target_ratio(self):
        total = self.background_pixels + self.target_pixels
        return self.target_pixels / total if total else 0.0


def dataset_stats(samples):
    """Exact label pixel counts over a labeled split."""
    images = 0
    target = 0
    background = 0
    for s in samples:
        if s.label is None:
            raise ValueError(f"unlabeled sample in labeled split: {s.location}")
        images += 1
        pos = int(s.label.sum())
        target += pos
        background += s.label.size - pos
    return SplitStats(images, background, target)


def mean_std(values):
    """Arithmetic mean and sample (n-1) standard deviation.

    With one value the std is None (undefined), matching the single-run
    reporting contract.
    """
    values = list(values)
    if not values:
        raise ValueError("mean_std of empty sequence")
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, None
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)
