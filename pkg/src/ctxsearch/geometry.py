"""Bounding-box arithmetic: IoU and greedy non-maximum suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle in continuous pixel coordinates, corners (x1, y1)
    top-left and (x2, y2) bottom-right. Must have strictly positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"BBox.{name} must be a finite number, got {value!r}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"BBox must satisfy x2 > x1 and y2 > y1, got "
                f"({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]; 0.0 when disjoint."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union)


def nms_indices(
    boxes: Sequence[BBox], scores: Sequence[float], threshold: float
) -> list[int]:
    """Greedy suppression over parallel box/score sequences.

    Repeatedly keeps the highest-scoring remaining box and discards every
    remaining box whose IoU with it strictly exceeds `threshold`. Returns the
    kept indices ordered by descending score; equal scores keep input order.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"NMS threshold must be in [0, 1], got {threshold!r}")
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must have the same length")
    for s in scores:
        if not math.isfinite(s):
            raise ValueError(f"NMS scores must be finite, got {s!r}")

    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= threshold for k in kept):
            kept.append(i)
    return kept


def nms(
    detections: Sequence[tuple[BBox, float]], threshold: float
) -> list[tuple[BBox, float]]:
    """Greedy NMS over (box, score) pairs; see :func:`nms_indices`."""
    boxes = [d[0] for d in detections]
    scores = [d[1] for d in detections]
    return [detections[i] for i in nms_indices(boxes, scores, threshold)]
