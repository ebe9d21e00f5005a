"""Anchors, the shared RPN head, proposal decoding and ROI sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from . import boxes as bx
from .boxes import Box
from .layers import Params, add_conv, conv
from .tensor import ShapeError, Tensor, reshape, transpose

log = logging.getLogger(__name__)


class Proposal(NamedTuple):
    box: Box
    objectness: float
    source_level: int


@dataclass
class AnchorSet:
    """Anchors per level as ``(H*W*A, 4)`` boxes ordered by (y, x, shape)."""

    levels: dict[int, np.ndarray]
    shapes: np.ndarray  # (A, 2) widths and heights
    sides: dict[int, tuple[int, int]]

    @property
    def per_position(self) -> int:
        return self.shapes.shape[0]

    def all(self) -> np.ndarray:
        return np.concatenate([self.levels[i] for i in sorted(self.levels)], axis=0)

    def level_of_each(self) -> np.ndarray:
        return np.concatenate([np.full(len(self.levels[i]), i) for i in sorted(self.levels)])

    def __len__(self) -> int:
        return sum(len(a) for a in self.levels.values())


def anchor_shapes(areas, ratios) -> np.ndarray:
    """``(w, h)`` for every (area, ratio) pair with ratio = h / w."""
    out = []
    for a in areas:
        for r in ratios:
            out.append((np.sqrt(a / r), np.sqrt(a * r)))
    return np.asarray(out, dtype=np.float64)


def generate_anchors(image_side: int, level_sides: dict[int, tuple[int, int]], areas, ratios) -> AnchorSet:
    """Tile every anchor shape over every position of every level.

    ``level_sides`` maps level index to ``(H, W)``; an anchor is centred on
    the image-space centre of its feature cell.
    """
    shapes = anchor_shapes(areas, ratios)
    half = 0.5 * shapes
    levels = {}
    for i, (H, W) in sorted(level_sides.items()):
        stride = image_side / W
        cy = (np.arange(H) + 0.5) * (image_side / H)
        cx = (np.arange(W) + 0.5) * stride
        cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
        c = np.stack([cxx, cyy], axis=-1).reshape(H * W, 1, 2)
        lo = c - half[None]
        hi = c + half[None]
        levels[i] = np.concatenate([lo, hi], axis=-1).reshape(-1, 4)
    return AnchorSet(levels, shapes, dict(level_sides))


def pyramid_sides(pyramid) -> dict[int, tuple[int, int]]:
    return {i: tuple(pyramid[i].shape[1:]) for i in (2, 3, 4, 5)}


# ------------------------------------------------------------------ RPN head


def init_rpn(params: Params, rng, channels: int, n_anchors: int) -> None:
    add_conv(params, "rpn.conv", rng, channels, channels, 3)
    add_conv(params, "rpn.objectness", rng, channels, n_anchors, 1, std=0.01)
    add_conv(params, "rpn.deltas", rng, channels, 4 * n_anchors, 1, std=0.01)


def rpn_forward(level_features: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    """Shared 3x3 conv then sibling 1x1 convs: ``[A,H,W]`` logits, ``[4A,H,W]`` deltas."""
    expected = params["rpn.conv.w"].shape[1]
    if level_features.ndim != 3 or level_features.shape[0] != expected:
        raise ShapeError(f"rpn expects [{expected},H,W] features, got {level_features.shape}")
    h = conv(params, "rpn.conv", level_features, act=True)
    return conv(params, "rpn.objectness", h), conv(params, "rpn.deltas", h)


def flatten_rpn(objectness: Tensor, deltas: Tensor) -> tuple[Tensor, Tensor]:
    """Reorder head outputs to anchor order: logits ``(H*W*A,)``, deltas ``(H*W*A, 4)``."""
    A, H, W = objectness.shape
    logits = reshape(transpose(objectness, (1, 2, 0)), (H * W * A,))
    d = reshape(deltas, (A, 4, H, W))
    d = reshape(transpose(d, (2, 3, 0, 1)), (H * W * A, 4))
    return logits, d


# ------------------------------------------------------------------ decoding


def decode_proposals(
    anchors: AnchorSet,
    objectness: np.ndarray,
    deltas: np.ndarray,
    image_side: int,
    pre_nms_k: int = 1000,
    nms_iou: float = 0.7,
    post_nms_k: int = 100,
    min_size: float = 1.0,
) -> list[Proposal]:
    """Decode, clip, keep the top ``pre_nms_k`` by objectness, NMS, keep ``post_nms_k``.

    ``objectness`` holds probabilities aligned with ``anchors.all()``.
    """
    anc = anchors.all()
    scores = np.asarray(objectness, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not (len(anc) == len(scores) == len(deltas)):
        raise ShapeError("anchors, objectness and deltas disagree in length")
    level = anchors.level_of_each()
    order = _top_k(scores, pre_nms_k)
    boxes = bx.clip(bx.decode(deltas[order], anc[order]), image_side, image_side)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    order, boxes = order[ok], boxes[ok]
    keep = _kernels.nms(boxes, scores[order], nms_iou)[:post_nms_k]
    return [Proposal(Box(*map(float, boxes[k])), float(scores[order[k]]), int(level[order[k]])) for k in keep]


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending, ties broken by index."""
    if k < len(scores):
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        part = np.nonzero(scores >= kth)[0]
    else:
        part = np.arange(len(scores))
    return part[np.argsort(-scores[part], kind="stable")][:k]


def proposals_to_array(proposals) -> np.ndarray:
    return np.asarray([p.box for p in proposals], dtype=np.float64).reshape(-1, 4)


# ------------------------------------------------------------------ sampling


class RoiSample(NamedTuple):
    roi: Box
    label: int
    target: Box | None


def sample_rois(proposals, gts, n: int = 512, pos_fraction: float = 0.5, pos_iou: float = 0.5, rng=None) -> list[RoiSample]:
    """Label proposals against ground truth and draw a fixed-size sample.

    Positives (max IOU >= ``pos_iou``) are capped at ``n * pos_fraction``;
    the remainder is filled with negatives. Positives come first.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    rois = np.asarray([getattr(p, "box", p) for p in proposals], dtype=np.float64).reshape(-1, 4)
    if len(rois) == 0:
        log.info("sample_rois: no proposals, skipping")
        return []
    gt = bx.as_array(gts)
    if len(gt):
        ious = bx.iou_matrix(rois, gt)
        best = ious.max(axis=1)
        match = ious.argmax(axis=1)
    else:
        best = np.zeros(len(rois))
        match = np.zeros(len(rois), dtype=np.int64)
    pos = np.nonzero(best >= pos_iou)[0]
    neg = np.nonzero(best < pos_iou)[0]
    n_pos = min(len(pos), int(round(n * pos_fraction)))
    if n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    else:
        pos = pos[:0]
    n_neg = min(len(neg), n - n_pos)
    neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    if n_pos < n * pos_fraction:
        log.debug("sample_rois: only %d positives, filled with %d negatives", n_pos, n_neg)
    out = [RoiSample(Box(*map(float, rois[i])), 1, Box(*map(float, gt[match[i]]))) for i in pos]
    out += [RoiSample(Box(*map(float, rois[i])), 0, None) for i in neg]
    return out


def label_anchors(anchors: np.ndarray, gts, batch: int = 256, pos_iou: float = 0.7, neg_iou: float = 0.3, rng=None):
    """RPN training labels: returns ``(indices, labels, targets)`` for a balanced anchor sample.

    An anchor is positive at IOU >= ``pos_iou`` or when it is the best
    anchor for some ground truth; negative below ``neg_iou``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    gt = bx.as_array(gts)
    if len(gt):
        ious = bx.iou_matrix(anchors, gt)
        best = ious.max(axis=1)
        match = ious.argmax(axis=1)
        pos_mask = best >= pos_iou
        best_per_gt = ious.max(axis=0)
        for j in range(len(gt)):
            if best_per_gt[j] > 0:
                pos_mask |= ious[:, j] == best_per_gt[j]
    else:
        best = np.zeros(len(anchors))
        match = np.zeros(len(anchors), dtype=np.int64)
        pos_mask = np.zeros(len(anchors), dtype=bool)
    pos = np.nonzero(pos_mask)[0]
    neg = np.nonzero(~pos_mask & (best < neg_iou))[0]
    n_pos = min(len(pos), batch // 2)
    pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
    n_neg = min(len(neg), batch - n_pos)
    neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    idx = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    targets = bx.encode(gt[match[pos]], anchors[pos]) if len(pos) else np.zeros((0, 4))
    return idx, labels, targets
