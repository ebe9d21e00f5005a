"""Momentum SGD with the stepped learning-rate schedule, and the training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import boxes as bx
from .config import RunConfig
from .data import Sample, augment_flips
from .heads import detection_loss
from .layers import Params
from .model import Detector, normalize_image
from .proposals import label_anchors, proposals_to_array, sample_rois
from .tensor import Tensor, backward, take_rows

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_values: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    boundaries: tuple[int, ...] = (30000, 50000)
    grad_clip: float = 0.0

    @classmethod
    def for_config(cls, cfg: RunConfig) -> "OptimizerState":
        return cls({}, 0, cfg.momentum, cfg.weight_decay, tuple(cfg.lr_values), cfg.lr_boundaries(), cfg.grad_clip)

    def lr(self, iteration: int | None = None) -> float:
        it = self.iteration if iteration is None else iteration
        for boundary, value in zip(self.boundaries, self.lr_values):
            if it < boundary:
                return value
        return self.lr_values[-1]


def sgd_step(state: OptimizerState, params: Params, grads: dict[str, np.ndarray] | None = None) -> OptimizerState:
    """``v <- m v + g + wd w``; ``w <- w - lr v``. Updates weights in place.

    With ``state.grad_clip > 0`` the raw gradients are first rescaled so
    their global L2 norm does not exceed it.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient at iteration {state.iteration} in {bad[:5]}")
    if state.grad_clip > 0:
        norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
        if norm > state.grad_clip:
            grads = {k: g * (state.grad_clip / norm) for k, g in grads.items()}
    lr = state.lr()
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        v = state.velocity.get(name)
        v = g + state.weight_decay * p.data if v is None else state.momentum * v + g + state.weight_decay * p.data
        state.velocity[name] = v
        p.data -= lr * v
    state.iteration += 1
    return state


def step_loss(model: Detector, image: np.ndarray, gts: np.ndarray, rng: np.random.Generator):
    """Forward one image through the whole pipeline and return ``(loss, terms)``."""
    cfg = model.cfg
    x = Tensor(normalize_image(image))
    side = x.shape[-1]
    pyr = model.pyramid(x)
    logits, deltas = model.rpn(pyr)
    anchors = model.anchors(pyr).all()
    idx, labels, targets = label_anchors(anchors, gts, cfg.rpn_batch, cfg.rpn_pos_iou, cfg.rpn_neg_iou, rng)
    rpn = (take_rows(logits, idx), labels, take_rows(deltas, idx), targets)

    props = proposals_to_array(model.proposals(pyr, logits, deltas, side))
    if len(gts):
        props = np.concatenate([props, bx.as_array(gts)], axis=0)
    samples = sample_rois(props, gts, cfg.rois_per_image, cfg.roi_pos_fraction, cfg.roi_pos_iou, rng)
    preds = None
    if samples:
        rois = np.array([s.roi for s in samples])
        preds = model.heads(*model.descriptors(rois, pyr))
    return detection_loss(samples, preds, rpn, cfg.loss_weights)


def random_flip(image: np.ndarray, gts: np.ndarray, rng: np.random.Generator):
    for mode in ("horizontal", "vertical", "diagonal"):
        if rng.random() < 0.5:
            image, gts = augment_flips(image, gts, mode)
    return image, gts


def train(
    samples: Sequence[Sample],
    cfg: RunConfig,
    model: Detector | None = None,
    on_log: Callable[[dict], None] | None = None,
) -> tuple[Detector, OptimizerState]:
    """Run ``cfg.iterations`` single-image SGD steps; deterministic for a fixed seed."""
    if not samples:
        raise ValueError("training set is empty")
    model = model or Detector(cfg)
    state = OptimizerState.for_config(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    order = np.zeros(0, dtype=np.int64)
    running: dict[str, float] = {}
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        if order.size == 0:
            order = rng.permutation(len(samples))
        sample = samples[int(order[0])]
        order = order[1:]
        image, gts = sample.image_float(), sample.boxes
        if cfg.flip_augment:
            image, gts = random_flip(image, gts, rng)
        for p in model.params.values():
            p.grad = None
        loss, terms = step_loss(model, image, gts, rng)
        backward(loss)
        lr = state.lr()
        sgd_step(state, model.params)
        for k, v in terms.items():
            running[k] = running.get(k, 0.0) + v
        running["loss"] = running.get("loss", 0.0) + float(loss.data)
        running["_n"] = running.get("_n", 0) + 1
        if cfg.log_every and ((it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations):
            n = running.pop("_n")
            record = {"iteration": it + 1, "lr": lr, **{k: v / n for k, v in sorted(running.items())}}
            record["elapsed"] = round(time.perf_counter() - t0, 1)
            terms_text = " ".join(f"{k}={record[k]:.4f}" for k in ("loss", "cls", "box", "rpn_cls", "rpn_box") if k in record)
            log.info("iter %d/%d lr=%g %s (%.0fs)", it + 1, cfg.iterations, lr, terms_text, record["elapsed"])
            if on_log is not None:
                on_log(record)
            running = {}
    return model, state
