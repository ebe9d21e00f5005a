"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations in this module build a
graph when any input requires a gradient; :func:`backward` walks that
graph in reverse topological order and deposits gradients on the leaves.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so callers reset
    them between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


elementwise_add = add


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]`` along axis 0."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), grad_fn)


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    xs = [as_tensor(x) for x in xs]
    tail = xs[0].shape[1:]
    if any(x.shape[1:] != tail for x in xs):
        raise ShapeError(f"concat_rows: incompatible shapes {[t.shape for t in xs]}")
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]
    return _result(np.concatenate([x.data for x in xs], axis=0), xs, lambda g: tuple(np.split(g, splits, axis=0)))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack along the channel axis (``-3``) in argument order."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    lead = xs[0].shape[:-3]
    spatial = xs[0].shape[-2:]
    for x in xs:
        if x.ndim < 3 or x.shape[-2:] != spatial or x.shape[:-3] != lead:
            raise ShapeError(f"concat_channels: incompatible shapes {[t.shape for t in xs]}")
    sizes = [x.shape[-3] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=-3))

    return _result(np.concatenate([x.data for x in xs], axis=-3), xs, grad_fn)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def grad_fn(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _result(out, (x,), grad_fn)


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), grad_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``(N, F)`` and weight ``(F, O)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        grads = [g @ wd.T, xd.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, grad_fn)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (``[C,H,W]`` or ``[N,C,H,W]``) with ``kernel`` ``[K,C,kh,kw]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = kernel.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expected [C,H,W] or [N,C,H,W] input and 4-d kernel, got {x.shape}, {kernel.shape}")
    N, C, H, W = xd.shape
    K, Ck, kh, kw = wd.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and kernel {kernel.shape}")
    w2 = wd.reshape(K, C * kh * kw)
    bd = None if bias is None else as_tensor(bias).data

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        flat = xd.reshape(N, C, H * W)
        out = np.matmul(w2, flat)
        if bd is not None:
            out = out + bd[:, None]
        out = out.reshape(N, K, H, W)

        def grad_fn(g):
            g2 = g.reshape(N, K, H * W)
            gx = np.matmul(w2.T, g2).reshape(N, C, H, W)
            gw = np.tensordot(g2, flat, axes=([0, 2], [0, 2])).reshape(wd.shape)
            grads = [gx[0] if squeeze else gx, gw]
            if bd is not None:
                grads.append(g2.sum(axis=(0, 2)))
            return tuple(grads)

    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
        out = (cols @ w2.T).reshape(N, Ho, Wo, K).transpose(0, 3, 1, 2)
        if bd is not None:
            out = out + bd[:, None, None]
        out = np.ascontiguousarray(out)

        def grad_fn(g):
            g = g.reshape(N, K, Ho, Wo)
            g2 = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, K)
            gw = (g2.T @ cols).reshape(wd.shape)
            dcols = (g2 @ w2).reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gx = _kernels.col2im(dcols, H, W, stride, padding)
            grads = [gx[0] if squeeze else gx, gw]
            if bd is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return tuple(grads)

    parents = [x, kernel] if bias is None else [x, kernel, as_tensor(bias)]
    return _result(out[0] if squeeze else out, parents, grad_fn)


# ------------------------------------------------------------------ normalisation


def softmax_rows(logits) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    logits = as_tensor(logits)
    s = logits.data - logits.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        gs = g * s
        inner = gs.sum(axis=-1, keepdims=True)
        gs -= s * inner
        return (gs,)

    return _result(s, (logits,), grad_fn)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ------------------------------------------------------------------ losses


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 ``targets``."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    x = logits.data
    n = max(x.size, 1)
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n
    return _result(np.array(loss), (logits,), lambda g: (g * (sigmoid(x) - t) / n,))


def smooth_l1(pred, target, normalizer: float = 1.0, beta: float = 1.0) -> Tensor:
    """Sum of elementwise smooth-L1 residuals divided by ``normalizer``."""
    pred = as_tensor(pred)
    r = pred.data - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    a = np.abs(r)
    small = a < beta
    val = np.where(small, 0.5 * r * r / beta, a - 0.5 * beta).sum() / normalizer
    d = np.where(small, r / beta, np.sign(r)) / normalizer
    return _result(np.array(val), (pred,), lambda g: (g * d,))


# ------------------------------------------------------------------ ROI pooling


def roi_pool_levels(maps: Sequence[Tensor], boxes, level_index, scales: Sequence[float], out: int = 14) -> Tensor:
    """Max-pool every ROI from the map chosen for it.

    ``boxes`` are ``(R, 4)`` image coordinates; ROI ``r`` is pooled from
    ``maps[level_index[r]]`` after multiplying its coordinates by
    ``scales[level_index[r]]``. Returns ``[R, C, out, out]``.
    """
    maps = [as_tensor(m) for m in maps]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    level_index = np.asarray(level_index, dtype=np.int64).reshape(-1)
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("roi_pool: ROI must have positive width and height")
    C = maps[0].shape[0]
    for m in maps:
        if m.ndim != 3 or m.shape[0] != C:
            raise ShapeError("roi_pool: maps must be [C,H,W] with equal channel counts")
    R = boxes.shape[0]
    pooled = np.zeros((R, C, out, out))
    saved = []
    for li, m in enumerate(maps):
        sel = np.nonzero(level_index == li)[0]
        if sel.size == 0:
            continue
        _, H, W = m.shape
        ys, ye, xs, xe = _kernels.roi_bins(boxes[sel] * scales[li], H, W, out)
        p, arg = _kernels.roi_max_pool(m.data, ys, ye, xs, xe)
        pooled[sel] = p
        saved.append((li, sel, arg))

    def grad_fn(g):
        grads: list[np.ndarray | None] = [None] * len(maps)
        for li, sel, arg in saved:
            _, H, W = maps[li].shape
            grads[li] = _kernels.roi_max_pool_backward(g[sel], arg, C, H, W)
        return tuple(grads)

    return _result(pooled, maps, grad_fn)


def roi_pool(features, roi, out: int = 14, scale: float = 1.0) -> Tensor:
    """Max-pool one ROI (image coordinates) from ``features`` to ``[C, out, out]``."""
    roi = np.asarray(roi, dtype=np.float64).reshape(1, 4)
    pooled = roi_pool_levels([features], roi, [0], [scale], out)
    return reshape(pooled, pooled.shape[1:])
