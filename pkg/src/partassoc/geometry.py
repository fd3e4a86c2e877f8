"""Axis-aligned box arithmetic.

Boxes are stored in corner form ``(x1, y1, x2, y2)``; center form
``(cx, cy, w, h)`` is available through the conversion helpers. Scalar
functions take :class:`Box` values, the ``*_matrix`` / array variants take
``(N, 4)`` numpy arrays in corner form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

CIOU_EPS = 1e-7


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box corners {self.as_tuple()}")

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @classmethod
    def from_seq(cls, seq: Iterable[float]) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return cx, cy, self.width, self.height

    def contains(self, other: "Box") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    out[..., 0] = (boxes[..., 0] + boxes[..., 2]) / 2.0
    out[..., 1] = (boxes[..., 1] + boxes[..., 3]) / 2.0
    out[..., 2] = boxes[..., 2] - boxes[..., 0]
    out[..., 3] = boxes[..., 3] - boxes[..., 1]
    return out


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    half_w = boxes[..., 2] / 2.0
    half_h = boxes[..., 3] / 2.0
    out[..., 0] = boxes[..., 0] - half_w
    out[..., 1] = boxes[..., 1] - half_h
    out[..., 2] = boxes[..., 0] + half_w
    out[..., 3] = boxes[..., 1] + half_h
    return out


def _intersection(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def inner_iou(body: Box, part: Box) -> float:
    """Intersection area over the part's own area (0 for a zero-area part)."""
    part_area = part.area
    if part_area <= 0.0:
        return 0.0
    return _intersection(body, part) / part_area


def ciou(a: Box, b: Box) -> float:
    if a.width <= 0 or a.height <= 0 or b.width <= 0 or b.height <= 0:
        raise DegenerateBoxError("ciou needs boxes with positive width and height")
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    overlap = inter / union
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    diag2 = cw * cw + ch * ch + CIOU_EPS
    (acx, acy), (bcx, bcy) = a.center, b.center
    rho2 = (acx - bcx) ** 2 + (acy - bcy) ** 2
    v = (4.0 / math.pi ** 2) * (math.atan(b.width / b.height) - math.atan(a.width / a.height)) ** 2
    alpha = v / (1.0 - overlap + v + CIOU_EPS)
    return overlap - rho2 / diag2 - alpha * v


# -- vectorised variants ----------------------------------------------------

def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return out


def inner_iou_many(body: np.ndarray, parts: np.ndarray) -> np.ndarray:
    """Inner IoU of each row of ``parts`` against the matching row of ``body``."""
    body = np.asarray(body, dtype=np.float64).reshape(-1, 4)
    parts = np.asarray(parts, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(body[:, 2], parts[:, 2]) - np.maximum(body[:, 0], parts[:, 0])
    ih = np.minimum(body[:, 3], parts[:, 3]) - np.maximum(body[:, 1], parts[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area = (parts[:, 2] - parts[:, 0]) * (parts[:, 3] - parts[:, 1])
    return np.where(area > 0.0, inter / np.where(area > 0.0, area, 1.0), 0.0)


def ciou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise CIoU of two ``(N, 4)`` corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    bw, bh = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(bw <= 0) or np.any(bh <= 0):
        raise DegenerateBoxError("ciou needs boxes with positive width and height")
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = aw * ah + bw * bh - inter
    overlap = inter / union
    cw = np.maximum(a[:, 2], b[:, 2]) - np.minimum(a[:, 0], b[:, 0])
    ch = np.maximum(a[:, 3], b[:, 3]) - np.minimum(a[:, 1], b[:, 1])
    diag2 = cw * cw + ch * ch + CIOU_EPS
    rho2 = ((a[:, 0] + a[:, 2]) / 2 - (b[:, 0] + b[:, 2]) / 2) ** 2 \
        + ((a[:, 1] + a[:, 3]) / 2 - (b[:, 1] + b[:, 3]) / 2) ** 2
    v = (4.0 / math.pi ** 2) * (np.arctan(bw / bh) - np.arctan(aw / ah)) ** 2
    alpha = v / (1.0 - overlap + v + CIOU_EPS)
    return overlap - rho2 / diag2 - alpha * v
