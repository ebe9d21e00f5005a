"""Dependencies computation: non-local attention over a region descriptor.

For ``x`` with ``N`` spatial positions, ``f = W_f x``, ``g = W_g x`` and
``h = W_h x``; the attention ``A = softmax_rows(f^T g)`` mixes ``h`` over
all positions and ``z = W_z y + x`` restores the channel count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import FusedDescriptor
from .layers import Params, he_normal
from .tensor import ShapeError, Tensor, add, matmul, reshape, softmax_rows, transpose


@dataclass
class DCWeights:
    W_f: Tensor  # [inner, C, 1, 1]
    W_g: Tensor
    W_h: Tensor
    W_z: Tensor  # [C, inner, 1, 1]

    def __post_init__(self):
        inner, c = self.W_f.shape[:2]
        for name in ("W_f", "W_g", "W_h"):
            if getattr(self, name).shape != (inner, c, 1, 1):
                raise ShapeError(f"{name} must be [{inner},{c},1,1]")
        if self.W_z.shape != (c, inner, 1, 1):
            raise ShapeError(f"W_z must be [{c},{inner},1,1]")

    @property
    def channels(self) -> int:
        return self.W_f.shape[1]

    @classmethod
    def from_params(cls, params: Params, prefix: str = "dc_R") -> "DCWeights":
        return cls(*(params[f"{prefix}.{n}"] for n in ("W_f", "W_g", "W_h", "W_z")))


def init_dc(params: Params, rng, channels: int, inner: int, prefix: str = "dc_R") -> None:
    for name in ("W_f", "W_g", "W_h"):
        params[f"{prefix}.{name}"] = Tensor(he_normal(rng, (inner, channels, 1, 1), channels, 1.0), True, f"{prefix}.{name}")
    params[f"{prefix}.W_z"] = Tensor(he_normal(rng, (channels, inner, 1, 1), inner, 1.0), True, f"{prefix}.W_z")


def dependencies_forward(x: Tensor, w: DCWeights, return_attention: bool = False):
    """Apply the block to ``[C,H,W]`` or ``[R,C,H,W]`` input; output has the input's shape."""
    single = x.ndim == 3
    if x.ndim not in (3, 4) or x.shape[-3] != w.channels:
        raise ShapeError(f"dependencies_forward expects [..,{w.channels},H,W], got {x.shape}")
    shape = x.shape
    xb = reshape(x, (1,) + shape) if single else x
    R, C, H, W = xb.shape
    n = H * W
    flat = reshape(xb, (R, C, n))

    def proj(t: Tensor) -> Tensor:
        return matmul(reshape(t, t.shape[:2]), flat)

    f, g, h = proj(w.W_f), proj(w.W_g), proj(w.W_h)  # [R, inner, N]
    attention = softmax_rows(matmul(transpose(f, (0, 2, 1)), g))  # [R, N, N], rows over j
    y = matmul(h, transpose(attention, (0, 2, 1)))  # y[:, :, i] = sum_j A[i, j] h[:, j]
    z = add(reshape(matmul(reshape(w.W_z, w.W_z.shape[:2]), y), (R, C, H, W)), xb)
    out = reshape(z, shape) if single else z
    if return_attention:
        att = attention.data[0] if single else attention.data
        return out, att, {"f": f, "g": g, "h": h, "y": y}
    return out


def attach_dc(desc: FusedDescriptor, w: DCWeights, allow_b: bool = False) -> FusedDescriptor:
    """Replace the descriptor tensor by the block output; origin is preserved."""
    if desc.origin != "R" and not allow_b:
        raise ValueError("the dependencies block is attached to enlarged-region (R) descriptors")
    return FusedDescriptor(dependencies_forward(desc.tensor, w), desc.origin)


def attention_matrix(x: np.ndarray, w: DCWeights) -> np.ndarray:
    _, att, _ = dependencies_forward(Tensor(x), w, return_attention=True)
    return att
