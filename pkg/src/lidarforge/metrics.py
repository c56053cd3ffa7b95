"""Segmentation evaluation: confusion accumulation, per-class IoU, mIoU.

mIoU is the unweighted mean of the per-class IoUs over classes that appear
at all (TP + FP + FN > 0); absent classes are flagged and excluded from the
mean rather than counted as 0 or 1, which would distort small test scenes.
Confusion matrices merge associatively, so per-cloud matrices may be
computed in parallel and pooled into one global report.
"""

from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import ConfigError


@dataclass
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray
    class_names: tuple

    @classmethod
    def zeros(cls, class_names):
        names = tuple(class_names)
        return cls(np.zeros((len(names), len(names)), dtype=np.uint64), names)

    @property
    def num_classes(self):
        return len(self.class_names)

    def accumulate(self, gt, pred):
        """Add one (ground truth, prediction) label pair set; streaming-safe."""
        gt = np.ascontiguousarray(gt, dtype=np.int64).reshape(-1)
        pred = np.ascontiguousarray(pred, dtype=np.int64).reshape(-1)
        if len(gt) != len(pred):
            raise ConfigError(f"gt has {len(gt)} labels, pred has {len(pred)}")
        c = self.num_classes
        if len(gt):
            if gt.min() < 0 or gt.max() >= c:
                raise ConfigError(f"gt label out of range [0, {c})")
            if pred.min() < 0 or pred.max() >= c:
                raise ConfigError(f"pred label out of range [0, {c})")
            self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c).astype(np.uint64)
        return self

    def merged(self, other):
        if other.class_names != self.class_names:
            raise ConfigError("cannot merge confusion matrices with different class tables")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


@dataclass
class IoUReport:
    """Per-class IoU (NaN where undefined) and the unweighted mIoU."""

    class_names: tuple
    iou: np.ndarray
    defined: np.ndarray
    miou: float

    def to_dict(self):
        return {
            "per_class_iou": {
                name: (None if not d else float(v))
                for name, v, d in zip(self.class_names, self.iou, self.defined)
            },
            "miou": float(self.miou),
        }


def mean_iou(ious) -> float:
    """Unweighted mean of per-class IoUs (NaNs excluded as undefined)."""
    vals = np.asarray(ious, dtype=np.float64)
    vals = vals[~np.isnan(vals)]
    if len(vals) == 0:
        return float("nan")
    return float(vals.mean())


def iou_report(cm: ConfusionMatrix) -> IoUReport:
    """Per-class IoU = TP / (TP + FP + FN); classes absent from both gt and
    prediction are flagged undefined and excluded from the mean."""
    if cm.num_classes < 1:
        raise ConfigError("confusion matrix needs at least one class")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    defined = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[defined] = tp[defined] / union[defined]
    return IoUReport(class_names=cm.class_names, iou=iou, defined=defined, miou=mean_iou(iou))


def class_distribution(source, class_names=None):
    """Per-class percentage of points.

    ``source`` may be an aggregate histogram array, a DatasetManifest, or an
    iterable of labeled clouds.  Percentages are exact (display rounding to
    0.1 is up to the caller) and sum to 100 for non-empty input.
    """
    if hasattr(source, "aggregate_histogram"):
        hist = np.asarray(source.aggregate_histogram, dtype=np.float64)
    elif isinstance(source, np.ndarray):
        hist = source.astype(np.float64)
    else:
        clouds = list(source)
        if not clouds:
            raise ConfigError("class_distribution needs a non-empty input")
        n = max(len(c.class_names) for c in clouds)
        hist = np.zeros(n)
        for c in clouds:
            hist += np.bincount(c.labels, minlength=n)
    total = hist.sum()
    if total == 0:
        raise ConfigError("class_distribution needs at least one point")
    return 100.0 * hist / total
