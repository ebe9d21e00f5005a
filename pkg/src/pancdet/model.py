"""The full detector: parameters plus the per-image forward passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import boxes as bx
from .backbone import BackboneConfig, FeaturePyramid, augment_pyramid, build_fpn, extract_features, init_augment, init_backbone, init_fpn
from .config import RunConfig
from .dc import DCWeights, attach_dc, init_dc
from .fusion import FusedDescriptor, build_descriptors, init_fusion, single_level_descriptor
from .heads import head_forward, init_heads
from .layers import Params
from .proposals import AnchorSet, decode_proposals, flatten_rpn, generate_anchors, init_rpn, proposals_to_array, rpn_forward
from .tensor import Tensor, concat_rows, no_grad, sigmoid


@dataclass
class RawDetection:
    box: tuple[float, float, float, float]
    score: float


def init_params(cfg: RunConfig, seed: int | None = None) -> Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: Params = {}
    bcfg = BackboneConfig(tuple(cfg.backbone_widths), 2, cfg.image_side)
    init_backbone(params, rng, bcfg)
    init_fpn(params, rng, bcfg.widths, cfg.pyramid_channels)
    if cfg.augment_pyramid:
        init_augment(params, rng, cfg.pyramid_channels)
    init_rpn(params, rng, cfg.pyramid_channels, len(cfg.anchor_areas) * len(cfg.anchor_ratios))
    init_fusion(params, rng, cfg.pyramid_channels, cfg.descriptor_channels, fused=cfg.feature_fusion)
    if cfg.dc_module:
        init_dc(params, rng, cfg.descriptor_channels, cfg.dc_channels, "dc_R")
        if cfg.dc_on_b:
            init_dc(params, rng, cfg.descriptor_channels, cfg.dc_channels, "dc_B")
    init_heads(params, rng, cfg.descriptor_channels, cfg.pool_size, cfg.head_hidden)
    return params


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-image standardisation of a ``[H, W]`` or ``[1, H, W]`` intensity array."""
    img = np.asarray(image, dtype=np.float64)
    img = img.reshape((1,) + img.shape[-2:])
    return (img - img.mean()) / (img.std() + 1e-6)


class Detector:
    def __init__(self, cfg: RunConfig, params: Params | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.backbone_cfg = BackboneConfig(tuple(cfg.backbone_widths), 2, cfg.image_side)
        self._anchors: dict[tuple[int, int], AnchorSet] = {}

    # -------------------------------------------------------------- pieces

    def pyramid(self, image: Tensor) -> FeaturePyramid:
        C = extract_features(image, self.params, self.backbone_cfg)
        P = build_fpn(C, self.params)
        if self.cfg.augment_pyramid:
            return augment_pyramid(P, self.params, self.cfg.pyramid_relu)
        return P

    def anchors(self, pyr: FeaturePyramid) -> AnchorSet:
        key = tuple(pyr[2].shape[1:])
        if key not in self._anchors:
            sides = {i: tuple(pyr[i].shape[1:]) for i in (2, 3, 4, 5)}
            side = key[1] * pyr.strides[2]
            self._anchors[key] = generate_anchors(side, sides, self.cfg.anchor_areas, self.cfg.anchor_ratios)
        return self._anchors[key]

    def rpn(self, pyr: FeaturePyramid) -> tuple[Tensor, Tensor]:
        """Objectness logits ``(M,)`` and deltas ``(M, 4)`` over all anchors of all levels."""
        logits, deltas = [], []
        for i in (2, 3, 4, 5):
            lg, dl = flatten_rpn(*rpn_forward(pyr[i], self.params))
            logits.append(lg)
            deltas.append(dl)
        return concat_rows(logits), concat_rows(deltas)

    def proposals(self, pyr: FeaturePyramid, logits: Tensor, deltas: Tensor, image_side: int):
        cfg = self.cfg
        return decode_proposals(
            self.anchors(pyr), sigmoid(logits.data), deltas.data, image_side, cfg.pre_nms_k, cfg.nms_iou, cfg.post_nms_k
        )

    def descriptors(self, rois: np.ndarray, pyr: FeaturePyramid) -> tuple[FusedDescriptor, FusedDescriptor]:
        cfg = self.cfg
        if cfg.feature_fusion:
            desc_b, desc_r = build_descriptors(rois, pyr, self.params, cfg)
        else:
            desc_b = single_level_descriptor(rois, pyr, self.params, cfg.pool_size)
            desc_r = FusedDescriptor(desc_b.tensor, "R")
        if cfg.dc_module:
            desc_r = attach_dc(desc_r, DCWeights.from_params(self.params, "dc_R"))
            if cfg.dc_on_b:
                desc_b = attach_dc(desc_b, DCWeights.from_params(self.params, "dc_B"), allow_b=True)
        return desc_b, desc_r

    def heads(self, desc_b: FusedDescriptor, desc_r: FusedDescriptor) -> tuple[Tensor, Tensor]:
        return head_forward(desc_b, desc_r, self.params)

    # -------------------------------------------------------------- inference

    def detect(self, image: np.ndarray) -> list[RawDetection]:
        """Scored boxes for one ``[H, W]`` image, after final NMS."""
        cfg = self.cfg
        x = Tensor(normalize_image(image))
        side = x.shape[-1]
        with no_grad():
            pyr = self.pyramid(x)
            logits, deltas = self.rpn(pyr)
            props = self.proposals(pyr, logits, deltas, side)
            if not props:
                return []
            rois = proposals_to_array(props)
            out_logits, out_deltas = self.heads(*self.descriptors(rois, pyr))
        scores = sigmoid(out_logits.data)
        boxes = bx.clip(bx.decode(out_deltas.data, rois), side, x.shape[-2])
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores = boxes[ok], scores[ok]
        keep = _kernels.nms(boxes, scores, cfg.eval_nms_iou)[: cfg.detections_per_image]
        return [RawDetection(tuple(map(float, boxes[k])), float(scores[k])) for k in keep]
