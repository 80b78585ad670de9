"""
Binary segmentation metrics: Dice, IoU, precision and recall, with
per-volume, per-slice and pooled-pixel aggregation.

Empty-vs-empty scores 1.0 and empty-vs-nonempty scores 0.0 whenever a
denominator vanishes.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from utils.exceptions import ShapeMismatchError
from utils.helpers import write_json

METRIC_NAMES = ("dice", "iou", "precision", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(mask, name):
    array = np.asarray(mask)
    if array.dtype == bool:
        return array
    if not np.isin(array, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return array.astype(bool)


def confusion_counts(pred_mask, gt_mask):
    pred = _as_binary(pred_mask, "prediction")
    gt = _as_binary(gt_mask, "ground truth")
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    tn, fp, fn, tp = confusion_matrix(gt.ravel(), pred.ravel(), labels=[False, True]).ravel()
    return ConfusionCounts(tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn))


def dice(counts):
    denominator = 2 * counts.tp + counts.fp + counts.fn
    if denominator == 0:
        return 1.0
    return 2 * counts.tp / denominator


def iou(counts):
    denominator = counts.tp + counts.fp + counts.fn
    if denominator == 0:
        return 1.0
    return counts.tp / denominator


def precision(counts):
    denominator = counts.tp + counts.fp
    if denominator == 0:
        # nothing predicted: right only if nothing was there
        return 1.0 if counts.fn == 0 else 0.0
    return counts.tp / denominator


def recall(counts):
    denominator = counts.tp + counts.fn
    if denominator == 0:
        return 1.0 if counts.fp == 0 else 0.0
    return counts.tp / denominator


def score(counts):
    return {"dice": dice(counts), "iou": iou(counts), "precision": precision(counts), "recall": recall(counts)}


@dataclass
class VolumeMetrics:
    volume_id: str
    counts: ConfusionCounts
    slice_counts: tuple = ()

    def row(self):
        row = {"volume_id": self.volume_id}
        row.update(score(self.counts))
        return row


@dataclass
class MetricsReport:
    rows: pd.DataFrame
    mean: dict
    pooled: dict
    slice_mean: dict = None

    def to_dict(self):
        return {
            "volumes": self.rows.to_dict(orient="records"),
            "mean": self.mean,
            "pooled": self.pooled,
            "slice_mean": self.slice_mean,
        }

    def to_csv(self, path):
        """Per-volume rows followed by aggregate footer rows."""
        footer = [dict(volume_id="__mean__", **self.mean), dict(volume_id="__pooled__", **self.pooled)]
        if self.slice_mean:
            footer.append(dict(volume_id="__slice_mean__", **self.slice_mean))
        table = pd.concat([self.rows, pd.DataFrame(footer)], ignore_index=True)
        table.to_csv(path, index=False)

    def to_json(self, path):
        write_json(self.to_dict(), path)


def aggregate(volume_metrics):
    """Unweighted per-volume mean, pooled-count metrics and, if available, per-slice mean."""
    volume_metrics = list(volume_metrics)
    if not volume_metrics:
        raise ValueError("cannot aggregate an empty list of volumes")
    rows = pd.DataFrame([v.row() for v in volume_metrics], columns=["volume_id", *METRIC_NAMES])
    mean = {name: float(rows[name].mean()) for name in METRIC_NAMES}

    pooled_counts = volume_metrics[0].counts
    for v in volume_metrics[1:]:
        pooled_counts = pooled_counts + v.counts
    pooled = score(pooled_counts)

    slice_scores = [score(c) for v in volume_metrics for c in v.slice_counts]
    slice_mean = None
    if slice_scores:
        slice_mean = {name: float(np.mean([s[name] for s in slice_scores])) for name in METRIC_NAMES}
    return MetricsReport(rows=rows, mean=mean, pooled=pooled, slice_mean=slice_mean)
