"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f() / d param, perturbing ``param.data`` in place."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(param.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over ``params``."""
    for p in params:
        p.zero_grad()
    backward(f())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, max_relative_error(analytic, numeric_grad(f, p, h)))
    return worst
