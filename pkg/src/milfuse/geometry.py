"""Axis-aligned box geometry: IoU, proper containment, greedy NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle; corners ordered so x1 <= x2 and y1 <= y2.

    Coordinates are continuous reals; area is (x2-x1)*(y2-y1) with no
    pixel +1 convention.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ScoredBox:
    """A box plus the class it was scored for and the score itself."""

    box: Box
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score) or self.score < 0.0:
            raise ValueError(f"score must be finite and non-negative, got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Returns 0.0 when the union has zero area (both boxes degenerate), so
    the result is always well defined in [0, 1].
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def surrounds(outer: Box, inner: Box) -> bool:
    """True iff ``outer`` properly contains ``inner``.

    Containment requires outer.x1 <= inner.x1, outer.y1 <= inner.y1,
    outer.x2 >= inner.x2, outer.y2 >= inner.y2 with at least one strict
    inequality; a box never surrounds an identical copy of itself.
    """
    if outer.x1 > inner.x1 or outer.y1 > inner.y1:
        return False
    if outer.x2 < inner.x2 or outer.y2 < inner.y2:
        return False
    return outer.as_tuple() != inner.as_tuple()


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box (score ties broken
    by lower input index) and discards every remaining box whose IoU with
    the kept one strictly exceeds ``iou_threshold``. Kept boxes are
    returned in descending score order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[ScoredBox] = []
    for i in order:
        cand = boxes[i]
        if all(iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept
