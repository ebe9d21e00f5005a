"""Backbone features, the top-down FPN, and the bottom-up augmented pyramid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Params, add_conv, conv
from .tensor import ShapeError, Tensor, add, relu, upsample2x

LEVELS = (2, 3, 4, 5)


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    image_side: int = 256

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError("backbone needs exactly four stage widths (strides 4, 8, 16, 32)")
        if self.blocks_per_stage < 2:
            raise ValueError("each stage needs at least two conv blocks")


@dataclass
class FeaturePyramid:
    """Level index (2..5) to a ``[C, H/2^i, W/2^i]`` map; ``kind`` is ``"P"`` or ``"S"``."""

    levels: dict[int, Tensor]
    kind: str = "P"
    strides: dict[int, int] = field(default_factory=lambda: {i: 2**i for i in LEVELS})

    def __post_init__(self):
        missing = [i for i in LEVELS if i not in self.levels]
        if missing:
            raise ValueError(f"pyramid {self.kind} is missing levels {missing}")
        c = self.levels[2].shape[0]
        for i in LEVELS:
            t = self.levels[i]
            if t.shape[0] != c:
                raise ShapeError(f"pyramid level {i} has {t.shape[0]} channels, expected {c}")
            if i > 2 and t.shape[1:] != tuple(s // 2 for s in self.levels[i - 1].shape[1:]):
                raise ShapeError(f"pyramid level {i} is not half the size of level {i - 1}")

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    @property
    def channels(self) -> int:
        return self.levels[2].shape[0]

    def maps(self) -> list[Tensor]:
        return [self.levels[i] for i in LEVELS]


# ------------------------------------------------------------------ backbone


def init_backbone(params: Params, rng, cfg: BackboneConfig, in_channels: int = 1) -> None:
    prev = in_channels
    for s, width in enumerate(cfg.widths, start=1):
        for b in range(cfg.blocks_per_stage):
            add_conv(params, f"backbone.stage{s}.conv{b + 1}", rng, prev if b == 0 else width, width, 3)
        prev = width


def extract_features(image: Tensor, params: Params, cfg: BackboneConfig) -> dict[int, Tensor]:
    """Run the plain conv stack; returns ``{2: C2, 3: C3, 4: C4, 5: C5}``.

    Stage 1 down-samples twice (stride 4); later stages once each.
    """
    if image.ndim != 3:
        raise ShapeError(f"backbone expects a [1,H,W] image, got {image.shape}")
    _, H, W = image.shape
    if H % 32 or W % 32:
        raise ValueError(f"image sides must be divisible by 32, got {H}x{W}")
    x = image
    feats = {}
    for s in range(1, 5):
        for b in range(cfg.blocks_per_stage):
            stride = 2 if (b == 0 or (s == 1 and b == 1)) else 1
            x = conv(params, f"backbone.stage{s}.conv{b + 1}", x, stride=stride, act=True)
        feats[s + 1] = x
    return feats


# ------------------------------------------------------------------ FPN


def init_fpn(params: Params, rng, widths, channels: int) -> None:
    for i, w in zip(LEVELS, widths):
        add_conv(params, f"fpn.lateral{i}", rng, w, channels, 1, gain=1.0)
    for i in LEVELS:
        add_conv(params, f"fpn.smooth{i}", rng, channels, channels, 3, gain=1.0)


def build_fpn(C: dict[int, Tensor], params: Params, upsample: bool = True) -> FeaturePyramid:
    """Top-down pathway with lateral 1x1 projections and 3x3 smoothing."""
    merged: dict[int, Tensor] = {}
    for i in reversed(LEVELS):
        lat = conv(params, f"fpn.lateral{i}", C[i])
        if i < 5 and upsample:
            lat = add(lat, upsample2x(merged[i + 1]))
        merged[i] = lat
    return FeaturePyramid({i: conv(params, f"fpn.smooth{i}", merged[i]) for i in LEVELS}, kind="P")


# ------------------------------------------------------------------ augmented path


def init_augment(params: Params, rng, channels: int) -> None:
    for i in (2, 3, 4):
        add_conv(params, f"aug.down{i}", rng, channels, channels, 3)
        add_conv(params, f"aug.post{i + 1}", rng, channels, channels, 3)


def augment_pyramid(P: FeaturePyramid, params: Params, use_relu: bool = True) -> FeaturePyramid:
    """Bottom-up path: ``S2 = P2``; ``S_{i+1} = conv3x3(down3x3_s2(S_i) + P_{i+1})``."""
    if P.kind != "P":
        raise ValueError("augment_pyramid expects a P pyramid")
    S = {2: P[2]}
    for i in (2, 3, 4):
        down = conv(params, f"aug.down{i}", S[i], stride=2, act=use_relu)
        S[i + 1] = conv(params, f"aug.post{i + 1}", add(down, P[i + 1]), act=use_relu)
    return FeaturePyramid(S, kind="S")


def spatial_sides(image_side: int) -> dict[int, int]:
    return {i: image_side // 2**i for i in LEVELS}


def zeros_like_pyramid(P: FeaturePyramid) -> FeaturePyramid:
    return FeaturePyramid({i: Tensor(np.zeros(P[i].shape)) for i in LEVELS}, kind=P.kind)
