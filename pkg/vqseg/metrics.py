"""
Segmentation metrics: confusion matrix, per-class IoU, mIoU and pixel accuracy.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .schemas import ClassIoU

logger = logging.getLogger(__name__)


class ConfusionMatrix:
    """
    C x C pixel counts, rows = ground truth, columns = prediction.
    Matrices from disjoint pixel sets merge by addition.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise DataError(f"confusion matrix needs at least one class, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError(f"cannot merge {self.num_classes}-class and {other.num_classes}-class matrices")
        self.counts += other.counts
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts.copy()
        return out.merge(other)


def _check_range(labels: np.ndarray, valid: np.ndarray, C: int, what: str) -> None:
    bad = valid & ((labels < 0) | (labels >= C))
    if bad.any():
        coord = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"{what} label {labels[coord]} at pixel {coord} outside [0, {C})")


def accumulate_confusion(
    pred: np.ndarray,
    gt: np.ndarray,
    ignore_index: int,
    cm: ConfusionMatrix,
) -> ConfusionMatrix:
    """Add one prediction / ground-truth pair to cm (in place) and return it."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    C = cm.num_classes
    valid = gt != ignore_index
    _check_range(gt, valid, C, "ground-truth")
    _check_range(pred, valid, C, "predicted")
    flat = gt[valid].astype(np.int64) * C + pred[valid].astype(np.int64)
    cm.counts += np.bincount(flat, minlength=C * C).reshape(C, C)
    return cm


def iou_report(
    cm: ConfusionMatrix,
    class_names: Optional[Sequence[str]] = None,
) -> Tuple[List[ClassIoU], float]:
    """
    Per-class IoU and their mean.

    Classes absent from both ground truth and prediction get iou None and
    are left out of the mean.
    """
    if cm.total == 0:
        raise DataError("confusion matrix is empty; nothing was evaluated")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - tp
    names = list(class_names) if class_names is not None else [str(c) for c in range(cm.num_classes)]
    if len(names) < cm.num_classes:
        names += [str(c) for c in range(len(names), cm.num_classes)]

    per_class: List[ClassIoU] = []
    defined: List[float] = []
    for c in range(cm.num_classes):
        if denom[c] == 0:
            per_class.append(ClassIoU(name=names[c], iou=None))
            continue
        iou = float(tp[c] / denom[c])
        per_class.append(ClassIoU(name=names[c], iou=iou))
        defined.append(iou)
    miou = float(np.mean(defined)) if defined else 0.0
    return per_class, miou


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DataError("confusion matrix is empty; nothing was evaluated")
    return float(np.trace(cm.counts)) / cm.total
