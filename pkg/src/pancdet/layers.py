"""Parameter stores and the few parameterised layers built on :mod:`tensor`."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, linear, relu

Params = dict  # name -> Tensor, insertion ordered


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


def add_conv(
    params: Params, name: str, rng, c_in: int, c_out: int, k: int, std: float | None = None, bias: bool = True, gain: float = 2.0
):
    """Fan-in scaled normal init; ``gain`` 2 before a ReLU, 1 for linear maps."""
    fan_in = c_in * k * k
    w = rng.normal(0.0, std, (c_out, c_in, k, k)) if std is not None else he_normal(rng, (c_out, c_in, k, k), fan_in, gain)
    params[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
    if bias:
        params[name + ".b"] = Tensor(np.zeros(c_out), requires_grad=True, name=name + ".b")


def add_linear(params: Params, name: str, rng, n_in: int, n_out: int, std: float | None = None):
    w = rng.normal(0.0, std, (n_in, n_out)) if std is not None else he_normal(rng, (n_in, n_out), n_in)
    params[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
    params[name + ".b"] = Tensor(np.zeros(n_out), requires_grad=True, name=name + ".b")


def conv(params: Params, name: str, x, stride: int = 1, act: bool = False) -> Tensor:
    w = params[name + ".w"]
    pad = w.shape[-1] // 2
    out = conv2d(x, w, params.get(name + ".b"), stride=stride, padding=pad)
    return relu(out) if act else out


def dense(params: Params, name: str, x, act: bool = False) -> Tensor:
    out = linear(x, params[name + ".w"], params[name + ".b"])
    return relu(out) if act else out
