"""Intersection-over-union scoring for label maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class IoUReport:
    per_class: dict  # class id -> IoU, only classes defined (non-empty union)
    miou: float
    defined: tuple  # class ids entering the mean

    def lines(self):
        out = [f"class {k}: IoU = {v:.4f}" for k, v in sorted(self.per_class.items())]
        out.append(f"mIoU = {self.miou:.4f} over classes {list(self.defined)}")
        return out


def _as_label_array(x):
    if isinstance(x, Tensor):
        x = x.data
    labels = getattr(x, "labels", None)
    if labels is not None:
        x = labels
    return np.asarray(x)


def miou(pred, gt, num_classes) -> IoUReport:
    """Per-class intersection over union; empty-union classes are excluded.

    IoU_k = |pred=k and gt=k| / |pred=k or gt=k|, mean over defined classes.
    """
    pred = _as_label_array(pred)
    gt = _as_label_array(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    if pred.size and (pred.max() >= num_classes or gt.max() >= num_classes):
        raise ValueError(f"label id out of range for K={num_classes}")
    per_class = {}
    for k in range(num_classes):
        p, g = pred == k, gt == k
        union = int(np.logical_or(p, g).sum())
        if union == 0:
            continue
        per_class[k] = float(np.logical_and(p, g).sum() / union)
    defined = tuple(sorted(per_class))
    mean = float(np.mean([per_class[k] for k in defined])) if defined else 0.0
    return IoUReport(per_class, mean, defined)
