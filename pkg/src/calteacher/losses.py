"""Focal loss on negatives and the IoU-driven weight for negative samples.

A negative sample that barely overlaps any known label (ground truth or
pseudo label) may sit on an unannotated object, so its classification loss
is down-weighted. The weight grows with the sample's best IoU the same way
focal loss grows with foreground confidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .geometry import BBox, iou


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FIoUConfig:
    w0: float = 0.5
    k: float = 1.5
    alpha_t: float = 0.25
    gamma: float = 2.0
    iou_clamp: float = 0.999

    def __post_init__(self):
        vals = (self.w0, self.k, self.alpha_t, self.gamma, self.iou_clamp)
        if not all(math.isfinite(v) for v in vals):
            raise LossConfigError(f"non-finite FIoU config {vals}")
        if self.w0 < 0 or self.k < 0 or self.gamma < 0:
            raise LossConfigError("w0, k and gamma must be non-negative")
        if not 0.0 < self.alpha_t < 1.0:
            raise LossConfigError(f"alpha_t must lie in (0, 1), got {self.alpha_t}")
        if not 0.0 < self.iou_clamp < 1.0:
            raise LossConfigError(f"iou_clamp must lie in (0, 1), got {self.iou_clamp}")


def focal_loss_neg(x: float, cfg: FIoUConfig = FIoUConfig()) -> float:
    """``-alpha_t * x**gamma * ln(1 - x)`` for a negative with foreground prob ``x``."""
    if not 0.0 <= x < 1.0:
        raise LossConfigError(f"focal loss input must lie in [0, 1), got {x}")
    if x == 0.0:
        return 0.0
    return -cfg.alpha_t * x**cfg.gamma * math.log1p(-x)


def fiou_weight(overlap: float, cfg: FIoUConfig = FIoUConfig()) -> float:
    # clamp keeps the weight finite as overlap -> 1
    return cfg.w0 + cfg.k * focal_loss_neg(min(max(overlap, 0.0), cfg.iou_clamp), cfg)


def max_label_iou(box: BBox, label_boxes: Sequence[BBox]) -> float:
    """Best IoU against all labels, regardless of class."""
    return max((iou(box, b) for b in label_boxes), default=0.0)


def negative_weights(negatives: Sequence[BBox], label_boxes: Sequence[BBox], cfg: FIoUConfig = FIoUConfig()) -> list[float]:
    return [fiou_weight(max_label_iou(b, label_boxes), cfg) for b in negatives]
