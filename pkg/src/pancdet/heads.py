"""Score and box-regression heads and the multi-task detection loss."""
from __future__ import annotations

import numpy as np

from . import boxes as bx
from .fusion import FusedDescriptor
from .layers import Params, add_linear, dense
from .tensor import Tensor, add, bce_with_logits, reshape, scale, sigmoid, smooth_l1, take_rows


def init_heads(params: Params, rng, descriptor_channels: int, pool: int, hidden: int) -> None:
    n_in = descriptor_channels * pool * pool
    add_linear(params, "head.score.fc1", rng, n_in, hidden)
    add_linear(params, "head.score.out", rng, hidden, 1, std=0.01)
    add_linear(params, "head.box.fc1", rng, n_in, hidden)
    add_linear(params, "head.box.out", rng, hidden, 4, std=0.001)


def _flatten(desc: FusedDescriptor) -> Tensor:
    t = desc.tensor
    if t.ndim == 3:
        t = reshape(t, (1,) + t.shape)
    return reshape(t, (t.shape[0], -1))


def head_forward(desc_b: FusedDescriptor, desc_r: FusedDescriptor, params: Params) -> tuple[Tensor, Tensor]:
    """Score logits ``(R,)`` from B descriptors, deltas ``(R, 4)`` from R descriptors."""
    if desc_b.origin != "B" or desc_r.origin != "R":
        raise ValueError(f"heads need (B, R) descriptors, got ({desc_b.origin}, {desc_r.origin})")
    hs = dense(params, "head.score.fc1", _flatten(desc_b), act=True)
    logits = dense(params, "head.score.out", hs)
    hb = dense(params, "head.box.fc1", _flatten(desc_r), act=True)
    deltas = dense(params, "head.box.out", hb)
    return reshape(logits, (logits.shape[0],)), deltas


def predict(desc_b: FusedDescriptor, desc_r: FusedDescriptor, params: Params, proposals=None):
    """Probabilities ``(R,)`` and deltas ``(R, 4)``; with ``proposals`` also decoded boxes."""
    logits, deltas = head_forward(desc_b, desc_r, params)
    scores = sigmoid(logits.data)
    if proposals is None:
        return scores, deltas.data
    return scores, deltas.data, bx.decode(deltas.data, proposals)


def detection_loss(samples, predictions, rpn=None, weights=(1.0, 1.0, 1.0, 1.0)):
    """Unweighted-by-default sum of the classification and regression terms.

    ``samples`` is the list of sampled ROIs (label, target), ``predictions``
    the ``(logits, deltas)`` head outputs aligned with it, and ``rpn`` an
    optional ``(logits, labels, deltas, targets)`` tuple for the proposal
    network's own terms. Box terms are averaged over positives. Returns
    ``(loss, terms)``.
    """
    terms: dict[str, Tensor] = {}
    if samples:
        logits, deltas = predictions
        labels = np.array([s.label for s in samples], dtype=np.float64)
        terms["cls"] = bce_with_logits(logits, labels)
        pos = np.nonzero(labels > 0)[0]
        if pos.size:
            rois = np.array([s.roi for s in samples])[pos]
            tgt = bx.encode(np.array([s.target for s in samples if s.label > 0]), rois)
            terms["box"] = smooth_l1(take_rows(deltas, pos), tgt, normalizer=pos.size)
    if rpn is not None:
        r_logits, r_labels, r_deltas, r_targets = rpn
        if len(r_labels):
            terms["rpn_cls"] = bce_with_logits(r_logits, r_labels)
        n_pos = int(np.sum(np.asarray(r_labels) > 0))
        if n_pos:
            terms["rpn_box"] = smooth_l1(take_rows(r_deltas, np.arange(n_pos)), r_targets, normalizer=n_pos)
    keys = ("cls", "box", "rpn_cls", "rpn_box")
    total = None
    for key, w in zip(keys, weights):
        if key in terms:
            t = terms[key] if w == 1.0 else scale(terms[key], w)
            total = t if total is None else add(total, t)
    if total is None:
        total = Tensor(0.0)
    return total, {k: float(v.data) for k, v in terms.items()}
