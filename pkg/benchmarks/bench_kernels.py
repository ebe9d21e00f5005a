#!/usr/bin/env python3
"""Compare the numba kernels with their pure-numpy twins.

Usage:
    python3 benchmarks/bench_kernels.py [--repeat 5] [--steps 5]

Each kernel is timed on inputs shaped like the desk-scale detector's
(32-channel pyramid, 32 sampled ROIs, 14x14 pooling, ~2000 proposals).
Outputs of the two paths are checked for agreement before timing. With
``--steps N`` the script also times N full training iterations in a
subprocess per path, selecting the path with ``PANCDET_DISABLE_NUMBA``.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pancdet import _kernels as K


def _rois(rng, n, side):
    xy = rng.uniform(0, side * 0.8, size=(n, 2))
    wh = rng.uniform(8, side * 0.4, size=(n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, side)], axis=1)


def cases(rng):
    feat = rng.normal(size=(32, 64, 64))
    bins = K.roi_bins(_rois(rng, 32, 256) / 4.0, 64, 64, 14)
    pooled, argmax = K.roi_max_pool_numpy(feat, *bins)
    grad = rng.normal(size=pooled.shape)
    dcols = rng.normal(size=(1, 32, 3, 3, 64, 64))
    boxes = _rois(rng, 2000, 256)
    scores = rng.uniform(size=2000)
    order = np.argsort(-scores, kind="stable")
    return {
        "roi_max_pool": (lambda: K._roi_max_pool_nb(feat, *bins), lambda: K.roi_max_pool_numpy(feat, *bins)),
        "roi_max_pool_backward": (
            lambda: K._roi_max_pool_backward_nb(grad, argmax, 32, 64, 64),
            lambda: K.roi_max_pool_backward_numpy(grad, argmax, 32, 64, 64),
        ),
        "col2im": (lambda: K._col2im_nb(dcols, 64, 64, 1, 1), lambda: K.col2im_numpy(dcols, 64, 64, 1, 1)),
        "nms": (lambda: K._nms_nb(boxes, order, 0.7), lambda: K.nms_numpy(boxes, scores, 0.7)),
    }


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, atol=1e-10) for x, y in zip(a, b))


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, slow) in cases(rng).items():
        if not _same(fast(), slow()):  # first call also compiles
            raise SystemExit(f"{name}: numba and numpy outputs disagree")
        n = min(timeit.repeat(fast, number=1, repeat=repeat)) * 1e3
        p = min(timeit.repeat(slow, number=1, repeat=repeat)) * 1e3
        print(f"{name:24s} {n:10.3f} {p:10.3f} {p / n:7.1f}x")


STEP_SCRIPT = """
import sys, time
from pancdet.config import RunConfig
from pancdet.data import generate_split
from pancdet.training import train
cfg = RunConfig(backbone_widths=(8, 16, 32, 64), pyramid_channels=32, descriptor_channels=32,
                dc_channels=16, head_hidden=128, rois_per_image=32, grad_clip=10.0, log_every=0)
samples = generate_split(8, 0.75, 7, "train")
train(samples, cfg.replace(iterations=1))  # warm-up and compile
t = time.perf_counter()
train(samples, cfg.replace(iterations=int(sys.argv[1])))
print((time.perf_counter() - t) / int(sys.argv[1]))
"""


def bench_steps(steps: int) -> None:
    print(f"\nfull training iteration ({steps} steps, desk config)")
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, PANCDET_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT, str(steps)], env=env, capture_output=True, text=True, check=True)
        print(f"{label:6s} {float(out.stdout.strip()):.3f} s/iteration")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=0, help="also time full training iterations")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba unavailable or disabled; nothing to compare")
    bench_kernels(args.repeat)
    if args.steps:
        bench_steps(args.steps)


if __name__ == "__main__":
    main()
