"""Run configuration: every tunable of the detector in one flat record.

The on-disk format is one ``key = value`` pair per line; ``#`` starts a
comment. Tuples are comma separated, booleans are ``true``/``false``.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

# Fields that change parameter shapes; a checkpoint is only loadable into a
# model whose topology hash matches.
TOPOLOGY_FIELDS = (
    "backbone_widths",
    "pyramid_channels",
    "descriptor_channels",
    "dc_channels",
    "pool_size",
    "head_hidden",
    "anchor_areas",
    "anchor_ratios",
    "augment_pyramid",
    "feature_fusion",
    "dc_module",
    "dc_on_b",
)


@dataclass
class RunConfig:
    # backbone and pyramid
    image_side: int = 256
    backbone_widths: tuple[int, ...] = (32, 64, 128, 256)
    pyramid_channels: int = 256
    pyramid_relu: bool = True
    # anchors: box areas 16^2 .. 256^2, ratios h/w for 1:1, 1:1.5, 1.5:1, 1:2, 2:1
    anchor_areas: tuple[float, ...] = (256.0, 1024.0, 4096.0, 16384.0, 65536.0)
    anchor_ratios: tuple[float, ...] = (1.0, 1.5, 1.0 / 1.5, 2.0, 0.5)
    # proposals
    pre_nms_k: int = 1000
    nms_iou: float = 0.7
    post_nms_k: int = 100
    rpn_batch: int = 256
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rois_per_image: int = 512
    roi_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.5
    # self-adaptive fusion, level rule constants
    k0: int = 5
    canonical_size: float = 224.0
    level_min: int = 3
    level_max: int = 4
    enlarge_w: float = 1.2
    enlarge_h: float = 1.2
    pool_size: int = 14
    descriptor_channels: int = 512
    # dependencies computation
    dc_channels: int = 256
    dc_on_b: bool = False
    # heads
    head_hidden: int = 256
    # optimisation: phases keep the 30K/20K/10K proportions at any length
    iterations: int = 6000
    lr_values: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    lr_phase_ratio: tuple[float, ...] = (3.0, 2.0, 1.0)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 0.0  # global L2 norm cap, 0 disables
    loss_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    flip_augment: bool = True
    seed: int = 0
    log_every: int = 100
    # evaluation
    score_threshold: float = 0.5
    eval_iou: float = 0.5
    eval_nms_iou: float = 0.3
    detections_per_image: int = 20
    # ablation switches
    augment_pyramid: bool = True
    feature_fusion: bool = True
    dc_module: bool = True

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        types = {f.name: f for f in fields(cls)}
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            changes[key] = _parse(value, getattr(base, key), key)
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def topology_hash(self) -> str:
        text = "\n".join(f"{k}={_format(getattr(self, k))}" for k in TOPOLOGY_FIELDS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def lr_boundaries(self) -> tuple[int, ...]:
        total = sum(self.lr_phase_ratio)
        acc, out = 0.0, []
        for r in self.lr_phase_ratio[:-1]:
            acc += r
            out.append(int(round(self.iterations * acc / total)))
        return tuple(out)

    def learning_rate(self, iteration: int) -> float:
        """Piecewise-constant rate; phase ``p`` covers ``[b[p-1], b[p])``."""
        for boundary, lr in zip(self.lr_boundaries(), self.lr_values):
            if iteration < boundary:
                return lr
        return self.lr_values[-1]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, tuple):
            kind = type(like[0]) if like else float
            return tuple(kind(float(x)) if kind is int else kind(x) for x in text.split(",") if x.strip())
        if isinstance(like, int):
            return int(float(text))
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {text!r}") from exc

