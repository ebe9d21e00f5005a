"""Self-adaptive feature fusion.

Each proposal is assigned a pyramid level ``k`` from its size, pooled at
levels ``k-1``, ``k`` and ``k+1``, and the three pooled maps are
concatenated and reduced by a 1x1 convolution. The same is done for the
proposal enlarged about its centre; the plain descriptor feeds scoring and
the enlarged one feeds box regression.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import boxes as bx
from .backbone import LEVELS, FeaturePyramid
from .boxes import Box
from .layers import Params, add_conv, conv
from .tensor import Tensor, concat_channels, roi_pool_levels

K0 = 5
CANONICAL = 224.0
S_MIN = 3
S_MAX = 4


class LevelAssignment(NamedTuple):
    k: int
    k_minus: int
    k_plus: int


@dataclass
class FusedDescriptor:
    """Pooled, fused region features; batched as ``[R, D, P, P]`` or single ``[D, P, P]``."""

    tensor: Tensor
    origin: str  # "B" or "R"

    def __post_init__(self):
        if self.origin not in ("B", "R"):
            raise ValueError(f"descriptor origin must be 'B' or 'R', got {self.origin!r}")


def assign_level(w: float, h: float, k0: int = K0, canonical: float = CANONICAL, s_min: int = S_MIN, s_max: int = S_MAX) -> LevelAssignment:
    if w <= 0 or h <= 0:
        raise ValueError("assign_level needs positive width and height")
    k = int(math.floor(k0 + math.log2(math.sqrt(w * h) / canonical)))
    k = min(s_max, max(k, s_min))
    return LevelAssignment(k, k - 1, k + 1)


def assign_levels(boxes, k0: int = K0, canonical: float = CANONICAL, s_min: int = S_MIN, s_max: int = S_MAX) -> np.ndarray:
    """Vectorised :func:`assign_level`; returns the centre level ``k`` per box."""
    b = bx.as_array(boxes)
    wh = np.maximum((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]), 1e-12)
    k = np.floor(k0 + np.log2(np.sqrt(wh) / canonical)).astype(np.int64)
    return np.clip(k, s_min, s_max)


def enlarge_roi(box, s_w: float = 1.2, s_h: float = 1.2, image_bounds: tuple[float, float] | None = None) -> Box:
    """Scale width and height about the centre, then clip to ``(width, height)`` bounds."""
    out = enlarge_boxes([box], s_w, s_h, image_bounds)[0]
    return Box(*map(float, out))


def enlarge_boxes(boxes, s_w: float = 1.2, s_h: float = 1.2, image_bounds=None) -> np.ndarray:
    b = bx.as_array(boxes)
    cx = 0.5 * (b[:, 0] + b[:, 2])
    cy = 0.5 * (b[:, 1] + b[:, 3])
    hw = 0.5 * s_w * (b[:, 2] - b[:, 0])
    hh = 0.5 * s_h * (b[:, 3] - b[:, 1])
    out = np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)
    if image_bounds is not None:
        out = bx.clip(out, image_bounds[0], image_bounds[1])
    return out


# ------------------------------------------------------------------ fusion


def init_fusion(params: Params, rng, channels: int, descriptor_channels: int, fused: bool = True) -> None:
    n_in = 3 * channels if fused else channels
    add_conv(params, "fusion.reduce_B", rng, n_in, descriptor_channels, 1, gain=1.0)
    if fused:
        add_conv(params, "fusion.reduce_R", rng, n_in, descriptor_channels, 1, gain=1.0)


def pool_three_levels(rois, S: FeaturePyramid, k, pool: int = 14) -> Tensor:
    """Pool every ROI on levels ``k-1, k, k+1`` and concatenate: ``[R, 3C, P, P]``."""
    rois = bx.as_array(rois)
    k = np.asarray(k, dtype=np.int64).reshape(-1)
    if np.any(k - 1 < LEVELS[0]) or np.any(k + 1 > LEVELS[-1]):
        raise ValueError(f"level assignment {sorted(set(k.tolist()))} reaches outside the pyramid")
    maps = S.maps()
    scales = [1.0 / S.strides[i] for i in LEVELS]
    pooled = [roi_pool_levels(maps, rois, k + off - LEVELS[0], scales, pool) for off in (-1, 0, 1)]
    return concat_channels(pooled)


def fuse(rois, S: FeaturePyramid, k, params: Params, origin: str = "B", pool: int = 14) -> FusedDescriptor:
    """Three-level pooling, concatenation and 1x1 reduction for a batch of ROIs."""
    stacked = pool_three_levels(rois, S, k, pool)
    return FusedDescriptor(conv(params, f"fusion.reduce_{origin}", stacked), origin)


def build_descriptors(rois, S: FeaturePyramid, params: Params, cfg) -> tuple[FusedDescriptor, FusedDescriptor]:
    """B and R descriptors for a batch of proposals; ``k`` comes from the B boxes only."""
    rois = bx.as_array(rois)
    k = assign_levels(rois, cfg.k0, cfg.canonical_size, cfg.level_min, cfg.level_max)
    side = cfg.image_side
    enlarged = enlarge_boxes(rois, cfg.enlarge_w, cfg.enlarge_h, (side, side))
    desc_b = fuse(rois, S, k, params, "B", cfg.pool_size)
    desc_r = fuse(enlarged, S, k, params, "R", cfg.pool_size)
    return desc_b, desc_r


def single_level_descriptor(rois, S: FeaturePyramid, params: Params, pool: int = 14) -> FusedDescriptor:
    """Plain FPN-style pooling from one level (used when fusion is ablated).

    Level rule: ``clamp(floor(4 + log2(sqrt(wh)/224)), 2, 5)``.
    """
    rois = bx.as_array(rois)
    k = assign_levels(rois, 4, CANONICAL, LEVELS[0], LEVELS[-1])
    scales = [1.0 / S.strides[i] for i in LEVELS]
    pooled = roi_pool_levels(S.maps(), rois, k - LEVELS[0], scales, pool)
    return FusedDescriptor(conv(params, "fusion.reduce_B", pooled), "B")
