"""Segmentation metrics: confusion matrices, IoU and precision-recall curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenegen import IGNORE


class MetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, rows = ground truth, cols = prediction

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise MetricError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate_confusion(pred, gt, cm: ConfusionMatrix) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one (pred, gt) label-map pair; IGNORE pixels are skipped."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    k = cm.num_classes
    keep = gt != IGNORE
    g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= k):
        raise MetricError(f"ground-truth class id outside [0, {k})")
    if p.size and (p.min() < 0 or p.max() >= k):
        raise MetricError(f"predicted class id outside [0, {k})")
    return ConfusionMatrix(cm.counts + np.bincount(g * k + p, minlength=k * k).reshape(k, k))


def iou_from_confusion(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    """Per-class IoU (None where the union is empty) and their mean over defined classes."""
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(0) + c.sum(1) - inter
    ious = [float(i / u) if u > 0 else None for i, u in zip(inter, union)]
    defined = [v for v in ious if v is not None]
    if not defined:
        raise MetricError("every class has an empty union; mIoU is undefined")
    return ious, float(np.mean(defined))


@dataclass
class PRCurve:
    thresholds: np.ndarray  # descending unique scores
    precision: np.ndarray
    recall: np.ndarray
    ap: float | None  # None when the class has no positive pixel


def pr_curve_and_ap(scores, gt) -> PRCurve:
    """Precision/recall at every unique score threshold and all-points interpolated AP.

    A pixel counts as predicted positive when its score is >= the threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(gt).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError("scores and ground truth differ in size")
    if s.size and (s.min() < 0 or s.max() > 1):
        raise MetricError("scores must lie in [0, 1]")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp, fp = np.cumsum(y), np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1] if s.size else np.array([], dtype=int)
    thresholds, tp, fp = s[last], tp[last], fp[last]
    precision = tp / np.maximum(tp + fp, 1)
    n_pos = int(y.sum())
    if n_pos == 0:
        return PRCurve(thresholds, precision, np.zeros_like(precision), None)
    recall = tp / n_pos
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * envelope))
    return PRCurve(thresholds, precision, recall, ap)
