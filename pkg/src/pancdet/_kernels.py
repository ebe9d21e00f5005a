"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical semantics. The numba
path is used unless ``PANCDET_DISABLE_NUMBA`` is set to a truthy value
or numba cannot be imported. Both paths are exercised by the test suite
and compared in ``benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("PANCDET_DISABLE_NUMBA", "").strip().lower() not in (
    "",
    "0",
    "false",
    "no",
)

try:
    if _DISABLED:
        raise ImportError("disabled by PANCDET_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def roi_bins(boxes: np.ndarray, height: int, width: int, out: int):
    """Integer sub-window bounds for every output cell of every ROI.

    ``boxes`` is ``(R, 4)`` in feature-map coordinates. Returns four
    ``(R, out)`` int64 arrays ``ys, ye, xs, xe`` (half-open, clamped to the
    map). A bin with ``ye <= ys`` or ``xe <= xs`` is empty.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1, y1, x2, y2 = boxes[:, 0:1], boxes[:, 1:2], boxes[:, 2:3], boxes[:, 3:4]
    bw = np.maximum(x2 - x1, 1e-6) / out
    bh = np.maximum(y2 - y1, 1e-6) / out
    j = np.arange(out, dtype=np.float64)[None, :]
    xs = np.clip(np.floor(x1 + j * bw), 0, width).astype(np.int64)
    xe = np.clip(np.ceil(x1 + (j + 1) * bw), 0, width).astype(np.int64)
    ys = np.clip(np.floor(y1 + j * bh), 0, height).astype(np.int64)
    ye = np.clip(np.ceil(y1 + (j + 1) * bh), 0, height).astype(np.int64)
    return ys, ye, xs, xe


# ---------------------------------------------------------------- numpy path


def roi_max_pool_numpy(feat, ys, ye, xs, xe):
    C, H, W = feat.shape
    R, P = ys.shape
    pooled = np.zeros((R, C, P, P))
    argmax = np.full((R, C, P, P), -1, dtype=np.int64)
    flat = feat.reshape(C, H * W)
    for r in range(R):
        mh = max(int((ye[r] - ys[r]).max()), 1)
        mw = max(int((xe[r] - xs[r]).max()), 1)
        rows = ys[r][:, None] + np.arange(mh)[None, :]  # (P, mh)
        cols = xs[r][:, None] + np.arange(mw)[None, :]  # (P, mw)
        rvalid = rows < ye[r][:, None]
        cvalid = cols < xe[r][:, None]
        rows = np.minimum(rows, H - 1)
        cols = np.minimum(cols, W - 1)
        idx = rows[:, None, :, None] * W + cols[None, :, None, :]  # (P, P, mh, mw)
        valid = rvalid[:, None, :, None] & cvalid[None, :, None, :]
        idx = idx.reshape(P, P, mh * mw)
        valid = valid.reshape(P, P, mh * mw)
        vals = np.where(valid[None], flat[:, idx], -np.inf)  # (C, P, P, K)
        best = vals.argmax(axis=-1)
        bestval = np.take_along_axis(vals, best[..., None], axis=-1)[..., 0]
        bestidx = np.take_along_axis(np.broadcast_to(idx, vals.shape), best[..., None], axis=-1)[..., 0]
        nonempty = valid.any(axis=-1)[None]
        pooled[r] = np.where(nonempty, bestval, 0.0)
        argmax[r] = np.where(nonempty, bestidx, -1)
    return pooled, argmax


def roi_max_pool_backward_numpy(grad, argmax, C, H, W):
    out = np.zeros((C, H * W))
    R = grad.shape[0]
    chan = np.broadcast_to(np.arange(C)[None, :, None, None], grad.shape)
    sel = argmax >= 0
    np.add.at(out, (chan[sel], argmax[sel]), grad[sel])
    del R
    return out.reshape(C, H, W)


def col2im_numpy(dcols, H, W, stride, padding):
    """Scatter-add ``(N, C, kh, kw, Ho, Wo)`` column grads into ``(N, C, H, W)``."""
    N, C, kh, kw, Ho, Wo = dcols.shape
    out = np.zeros((N, C, H + 2 * padding, W + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i, j]
    return out[:, :, padding : padding + H, padding : padding + W]


def nms_numpy(boxes, scores, iou_threshold):
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[(inter <= 0) | (iou < iou_threshold)]
    return np.asarray(keep, dtype=np.int64)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _roi_max_pool_nb(feat, ys, ye, xs, xe):
        C, H, W = feat.shape
        R, P = ys.shape
        pooled = np.zeros((R, C, P, P))
        argmax = np.full((R, C, P, P), -1, dtype=np.int64)
        for r in range(R):
            for c in range(C):
                for py in range(P):
                    y0 = ys[r, py]
                    y1 = ye[r, py]
                    for px in range(P):
                        x0 = xs[r, px]
                        x1 = xe[r, px]
                        best = -np.inf
                        bi = -1
                        for y in range(y0, y1):
                            for x in range(x0, x1):
                                v = feat[c, y, x]
                                if v > best:
                                    best = v
                                    bi = y * W + x
                        if bi >= 0:
                            pooled[r, c, py, px] = best
                            argmax[r, c, py, px] = bi
        return pooled, argmax

    @njit(cache=True)
    def _roi_max_pool_backward_nb(grad, argmax, C, H, W):
        out = np.zeros((C, H * W))
        R, _, P, Q = grad.shape
        for r in range(R):
            for c in range(C):
                for py in range(P):
                    for px in range(Q):
                        k = argmax[r, c, py, px]
                        if k >= 0:
                            out[c, k] += grad[r, c, py, px]
        return out.reshape(C, H, W)

    @njit(cache=True)
    def _col2im_nb(dcols, H, W, stride, padding):
        N, C, kh, kw, Ho, Wo = dcols.shape
        out = np.zeros((N, C, H + 2 * padding, W + 2 * padding))
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(Ho):
                            yy = i + stride * y
                            for x in range(Wo):
                                out[n, c, yy, j + stride * x] += dcols[n, c, i, j, y, x]
        return out[:, :, padding : padding + H, padding : padding + W].copy()

    @njit(cache=True)
    def _nms_nb(boxes, order, iou_threshold):
        n = order.shape[0]
        suppressed = np.zeros(n, dtype=np.bool_)
        keep = np.empty(n, dtype=np.int64)
        nk = 0
        for a in range(n):
            if suppressed[a]:
                continue
            i = order[a]
            keep[nk] = i
            nk += 1
            ai = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
            for b in range(a + 1, n):
                if suppressed[b]:
                    continue
                j = order[b]
                iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
                ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                aj = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
                union = ai + aj - inter
                if union > 0.0 and inter / union >= iou_threshold:
                    suppressed[b] = True
        return keep[:nk]


# ---------------------------------------------------------------- dispatch


def roi_max_pool(feat, ys, ye, xs, xe):
    """Max over every bin; returns ``(pooled, argmax)`` with argmax -1 on empty bins."""
    feat = np.ascontiguousarray(feat, dtype=np.float64)
    if HAVE_NUMBA:
        return _roi_max_pool_nb(feat, ys, ye, xs, xe)
    return roi_max_pool_numpy(feat, ys, ye, xs, xe)


def roi_max_pool_backward(grad, argmax, C, H, W):
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if HAVE_NUMBA:
        return _roi_max_pool_backward_nb(grad, argmax, C, H, W)
    return roi_max_pool_backward_numpy(grad, argmax, C, H, W)


def col2im(dcols, H, W, stride, padding):
    if HAVE_NUMBA:
        return _col2im_nb(np.ascontiguousarray(dcols), H, W, stride, padding)
    return col2im_numpy(dcols, H, W, stride, padding)


def nms(boxes, scores, iou_threshold):
    """Greedy NMS; returns kept indices in descending score order."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if HAVE_NUMBA:
        order = np.argsort(-scores, kind="stable")
        return _nms_nb(boxes, order, float(iou_threshold))
    return nms_numpy(boxes, scores, iou_threshold)
