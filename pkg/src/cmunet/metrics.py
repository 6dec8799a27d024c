"""Segmentation metrics derived from a pixel confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError


class ConfusionMatrix:
    """K x K pixel counts; counts[t][p] = pixels of true class t predicted p.

    Updates are additive, so accumulation order (and sharding followed by
    ``merge``) cannot change the result.
    """

    def __init__(self, num_classes, counts=None):
        if num_classes < 2:
            raise DataError("ConfusionMatrix needs at least 2 classes")
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes) or (counts < 0).any():
                raise DataError("ConfusionMatrix: bad counts array")
            self.counts = counts

    def update(self, pred, target):
        pred = np.asarray(pred)
        target = np.asarray(target)
        if pred.shape != target.shape:
            raise DimensionError("confusion update: prediction/target shape mismatch")
        k = self.num_classes
        if pred.size == 0:
            return self
        for name, arr in (("pred", pred), ("target", target)):
            if arr.min() < 0 or arr.max() >= k:
                raise DataError(f"confusion update: {name} class out of range [0, {k})")
        flat = target.reshape(-1).astype(np.int64) * k + pred.reshape(-1).astype(np.int64)
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise DataError("confusion merge: class count mismatch")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def total(self):
        return int(self.counts.sum())


def confusion_update(cm, pred, target):
    return cm.update(pred, target)


def argmax_predictions(logits):
    """Class map from logits; ties resolve to the lowest class index."""
    arr = logits.data if hasattr(logits, "data") else np.asarray(logits)
    return arr.argmax(axis=1)


@dataclass
class MetricReport:
    per_class: dict       # class index -> {f1, iou, precision, recall}
    mF1: float
    mIoU: float
    OA: float

    def to_dict(self):
        return {"per_class": {str(k): v for k, v in self.per_class.items()},
                "mF1": self.mF1, "mIoU": self.mIoU, "OA": self.OA}


def _safe_div(num, den):
    return float(num / den) if den > 0 else 0.0


def compute_metrics(cm, included_classes=None):
    """Per-class precision/recall/F1/IoU plus means and overall accuracy.

    0/0 cases (class absent from both prediction and truth) are defined as
    0. Means run over ``included_classes`` only; overall accuracy is
    trace/total over all pixels.
    """
    if cm.total() == 0:
        raise DataError("compute_metrics: empty confusion matrix")
    k = cm.num_classes
    included = list(range(k)) if included_classes is None else list(included_classes)
    if any(c < 0 or c >= k for c in included):
        raise DataError("compute_metrics: included class out of range")
    counts = cm.counts
    per_class = {}
    for c in range(k):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2.0 * precision * recall, precision + recall)
        iou = _safe_div(tp, tp + fp + fn)
        per_class[c] = {"f1": f1, "iou": iou, "precision": precision, "recall": recall}
    mf1 = float(np.mean([per_class[c]["f1"] for c in included]))
    miou = float(np.mean([per_class[c]["iou"] for c in included]))
    oa = float(np.trace(counts) / counts.sum())
    return MetricReport(per_class=per_class, mF1=mf1, mIoU=miou, OA=oa)
