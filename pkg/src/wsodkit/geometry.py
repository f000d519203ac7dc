"""Axis-aligned box arithmetic.

Boxes use continuous corner coordinates ``(x1, y1, x2, y2)`` with
``area = (x2 - x1) * (y2 - y1)``; there is no ``+1`` pixel convention.
Array helpers take ``(N, 4)`` float arrays in the same layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

#: Boxes whose area falls below this (pixel^2) are rejected.
MIN_AREA = 1e-6


class ZeroAreaAfterClip(ValueError):
    """Clipping a box to the image collapsed it to (near) zero area."""


class InvalidBox(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise InvalidBox(f"non-finite coordinates: {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBox(f"box needs x2 > x1 and y2 > y1, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)


@dataclass
class ProposalSet:
    """Candidate regions for one image."""

    boxes: list[Box]
    image_id: str
    image_size: tuple[int, int]  # (width, height)
    objectness: list[float] | None = None
    _array: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.boxes) == 0:
            raise ValueError(f"proposal set for {self.image_id!r} is empty")

    def __len__(self) -> int:
        return len(self.boxes)

    def as_array(self) -> np.ndarray:
        if self._array is None:
            self._array = boxes_to_array(self.boxes)
        return self._array

    @classmethod
    def from_array(cls, arr: np.ndarray, image_id: str, image_size: tuple[int, int]) -> "ProposalSet":
        boxes = [Box.from_seq(row) for row in np.asarray(arr, dtype=np.float64)]
        return cls(boxes=boxes, image_id=image_id, image_size=tuple(image_size))


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    rows = [b.as_tuple() for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(inter > 0, inter / np.maximum(union, MIN_AREA), 0.0)


def greedy_diverse_indices(boxes: np.ndarray, order: Sequence[int], threshold: float) -> list[int]:
    """Walk ``order`` and keep an index iff its IoU with every kept box is < threshold.

    The first index is always kept. Returned indices keep the walk order.
    """
    order = list(order)
    if not order:
        return []
    sub = np.asarray(boxes, dtype=np.float64)[order]
    ious = iou_matrix(sub, sub)
    kept: list[int] = []
    for i in range(len(order)):
        if all(ious[i, j] < threshold for j in kept):
            kept.append(i)
    return [order[i] for i in kept]


def greedy_diverse_select(sorted_boxes: Sequence[Box], threshold: float) -> list[Box]:
    """Diversity filter over boxes already sorted by descending score."""
    if not sorted_boxes:
        return []
    arr = boxes_to_array(sorted_boxes)
    keep = greedy_diverse_indices(arr, range(len(sorted_boxes)), threshold)
    return [sorted_boxes[i] for i in keep]


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Standard NMS: suppress boxes whose IoU with a kept box exceeds the threshold.

    Ties in score are broken by original index.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def clip_box(b: Box, size: tuple[float, float], eps: float = MIN_AREA) -> Box:
    w, h = size
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {size}")
    x1 = min(max(b.x1, 0.0), w)
    y1 = min(max(b.y1, 0.0), h)
    x2 = min(max(b.x2, 0.0), w)
    y2 = min(max(b.y2, 0.0), h)
    if (x2 - x1) <= 0 or (y2 - y1) <= 0 or (x2 - x1) * (y2 - y1) < eps:
        raise ZeroAreaAfterClip(f"{b} collapses when clipped to {size}")
    return Box(x1, y1, x2, y2)


def clip_boxes(boxes: np.ndarray, size: tuple[float, float]) -> np.ndarray:
    w, h = size
    out = np.asarray(boxes, dtype=np.float64).copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, h)
    return out


def encode_deltas(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Regression targets that move ``src`` boxes onto ``dst`` boxes.

    ``(dx, dy, dw, dh) = ((cx' - cx) / w, (cy' - cy) / h, log(w' / w), log(h' / h))``
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 4)
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    scx, scy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    dw, dh = dst[:, 2] - dst[:, 0], dst[:, 3] - dst[:, 1]
    dcx, dcy = dst[:, 0] + 0.5 * dw, dst[:, 1] + 0.5 * dh
    return np.stack([(dcx - scx) / sw, (dcy - scy) / sh, np.log(dw / sw), np.log(dh / sh)], axis=1)


# exp() guard for predicted size deltas, as in common detection code
_MAX_LOG_RATIO = math.log(1000.0 / 16)


def decode_deltas(src: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    scx, scy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    cx = scx + deltas[:, 0] * sw
    cy = scy + deltas[:, 1] * sh
    w = sw * np.exp(np.minimum(deltas[:, 2], _MAX_LOG_RATIO))
    h = sh * np.exp(np.minimum(deltas[:, 3], _MAX_LOG_RATIO))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
