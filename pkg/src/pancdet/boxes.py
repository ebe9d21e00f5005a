"""Axis-aligned boxes in image pixel coordinates and the usual box algebra."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

# Cap on exp() of predicted log-size deltas, as in common two-stage detectors.
_MAX_LOG_SCALE = np.log(1000.0 / 16.0)


class Box(NamedTuple):
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
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_valid(self) -> bool:
        return self.x2 > self.x1 and self.y2 > self.y1

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def as_array(boxes) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def area(boxes) -> np.ndarray:
    b = as_array(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou(a, b) -> float:
    """Intersection over union of two boxes."""
    return float(iou_matrix(a, b)[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IOU, shape ``(len(a), len(b))``."""
    a, b = as_array(a), as_array(b)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def clip(boxes, width: float, height: float) -> np.ndarray:
    b = as_array(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def encode(boxes, anchors) -> np.ndarray:
    """Regression targets ``(dx, dy, dw, dh)`` taking ``anchors`` to ``boxes``."""
    b, a = as_array(boxes), as_array(anchors)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    bw, bh = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    bcx, bcy = b[:, 0] + 0.5 * bw, b[:, 1] + 0.5 * bh
    return np.stack([(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode(deltas, anchors) -> np.ndarray:
    """Inverse of :func:`encode`: apply ``(dx, dy, dw, dh)`` to ``anchors``."""
    d, a = np.asarray(deltas, dtype=np.float64).reshape(-1, 4), as_array(anchors)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], _MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[:, 3], _MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
