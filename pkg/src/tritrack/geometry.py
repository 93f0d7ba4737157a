"""Boxes, IoU, FCOS-style distance encoding, and greedy NMS.

Boxes live in continuous image pixel coordinates in corner form, so area
is (x2 - x1) * (y2 - y1) with no +1 pixel convention. A feature cell
(i, j) at a given stride maps to the image point ((j + 0.5) * stride,
(i + 0.5) * stride).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_valid(self) -> bool:
        return self.x2 > self.x1 and self.y2 > self.y1

    def clip(self, width: float, height: float) -> "Box":
        return Box(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def scaled(self, factor: float) -> "Box":
        return Box(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def as_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)

    @staticmethod
    def from_xywh(x: float, y: float, w: float, h: float) -> "Box":
        return Box(x, y, x + w, y + h)


class LtrbTarget(NamedTuple):
    """Distances from an interior point to the four box sides, all >= 0."""

    l: float
    t: float
    r: float
    b: float


def iou(a: Box, b: Box) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def map_cell_to_image(i: int, j: int, stride: int) -> tuple[float, float]:
    """Feature cell (row i, col j) -> image point at the cell center."""
    return ((j + 0.5) * stride, (i + 0.5) * stride)


def encode_ltrb(location: tuple[int, int], stride: int, gt: Box) -> LtrbTarget:
    i, j = location
    px, py = map_cell_to_image(i, j, stride)
    return LtrbTarget(px - gt.x1, py - gt.y1, gt.x2 - px, gt.y2 - py)


def decode_ltrb(location: tuple[int, int], stride: int, t: LtrbTarget) -> Box:
    i, j = location
    px, py = map_cell_to_image(i, j, stride)
    return Box(px - t.l, py - t.t, px + t.r, py + t.b)


def nms(
    scored_boxes: Sequence[tuple[Box, float]],
    iou_threshold: float,
    top_n: int,
) -> list[tuple[Box, float]]:
    """Greedy descending-score suppression.

    A box is kept iff its IoU with every previously kept box is <= the
    threshold; ties in score are broken by input index (earlier wins), so
    the output is deterministic. Returns at most top_n boxes in descending
    score order.
    """
    if not scored_boxes:
        return []
    boxes = np.array([[b.x1, b.y1, b.x2, b.y2] for b, _ in scored_boxes])
    scores = np.array([s for _, s in scored_boxes], dtype=np.float64)
    keep = nms_arrays(boxes, scores, iou_threshold, top_n)
    return [scored_boxes[k] for k in keep]


def nms_arrays(
    boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, top_n: int
) -> list[int]:
    """Array-based NMS; returns kept input indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    kept: list[int] = []
    while order.size and len(kept) < top_n:
        k = int(order[0])
        kept.append(k)
        if order.size == 1:
            break
        rest = order[1:]
        ix = np.minimum(x2[k], x2[rest]) - np.maximum(x1[k], x1[rest])
        iy = np.minimum(y2[k], y2[rest]) - np.maximum(y1[k], y1[rest])
        inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
        ovr = inter / (areas[k] + areas[rest] - inter)
        order = rest[ovr <= iou_threshold]
    return kept
