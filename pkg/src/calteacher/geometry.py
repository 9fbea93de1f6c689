"""Axis-aligned boxes in corner form and their intersection-over-union."""

from __future__ import annotations

import math
from dataclasses import dataclass


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise BoxError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise BoxError(f"inverted box {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scale(self, s: float) -> "BBox":
        """Scale all coordinates about the origin."""
        return BBox(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)

    def clamp(self, width: float, height: float) -> "BBox":
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, x1), width)
        y2 = min(max(self.y2, y1), height)
        return BBox(x1, y1, x2, y2)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes.

    Degenerate (zero-area) boxes give 0 against any other box, so the result
    is never NaN. Coincident boxes give exactly 1.
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw < 0.0 or ih < 0.0:
        return 0.0
    inter = iw * ih
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    if inter <= 0.0:
        return 0.0
    return min(1.0, inter / union)
