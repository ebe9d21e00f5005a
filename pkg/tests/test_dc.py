import numpy as np
import pytest

from pancdet.dc import DCWeights, attach_dc, attention_matrix, dependencies_forward, init_dc
from pancdet.fusion import FusedDescriptor
from pancdet.tensor import ShapeError, Tensor


def _weights(rng, c=6, inner=3, scale=0.3):
    params = {}
    init_dc(params, rng, c, inner, "dc")
    w = DCWeights.from_params(params, "dc")
    for t in (w.W_f, w.W_g, w.W_h, w.W_z):
        t.data = rng.normal(scale=scale, size=t.shape)
    return w


def test_zero_wz_is_exact_identity(rng):
    w = _weights(rng)
    w.W_z.data[...] = 0.0
    x = rng.normal(size=(6, 5, 5))
    np.testing.assert_array_equal(dependencies_forward(Tensor(x), w).data, x)


def test_zero_wf_gives_uniform_attention_and_constant_y(rng):
    w = _weights(rng)
    w.W_f.data[...] = 0.0
    x = rng.normal(size=(6, 4, 4))
    _, att, inner = dependencies_forward(Tensor(x), w, return_attention=True)
    np.testing.assert_allclose(att, 1.0 / 16, atol=1e-15)
    y, h = inner["y"].data[0], inner["h"].data[0]
    np.testing.assert_allclose(y, np.repeat(h.mean(axis=1, keepdims=True), 16, axis=1), atol=1e-12)


def test_attention_rows_sum_to_one_and_open_interval(rng):
    w = _weights(rng, scale=0.5)
    att = attention_matrix(rng.normal(size=(6, 7, 7)), w)
    assert att.shape == (49, 49)
    np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(att > 0) and np.all(att < 1)


def test_weighted_sum_matches_direct_loop(rng):
    w = _weights(rng)
    x = rng.normal(size=(6, 3, 3))
    out = dependencies_forward(Tensor(x), w).data
    flat = x.reshape(6, 9)
    f, g, h = (m.data[:, :, 0, 0] @ flat for m in (w.W_f, w.W_g, w.W_h))
    ref = np.empty_like(flat)
    for i in range(9):
        phi = np.array([f[:, i] @ g[:, j] for j in range(9)])
        a = np.exp(phi - phi.max())
        a /= a.sum()
        y_i = sum(a[j] * h[:, j] for j in range(9))
        ref[:, i] = w.W_z.data[:, :, 0, 0] @ y_i + flat[:, i]
    np.testing.assert_allclose(out.reshape(6, 9), ref, atol=1e-12)


def test_permutation_equivariance(rng):
    w = _weights(rng)
    x = rng.normal(size=(6, 4, 4))
    perm = rng.permutation(16)
    out = dependencies_forward(Tensor(x), w).data.reshape(6, 16)
    xp = x.reshape(6, 16)[:, perm].reshape(6, 4, 4)
    out_p = dependencies_forward(Tensor(xp), w).data.reshape(6, 16)
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_batched_matches_single(rng):
    w = _weights(rng)
    x = rng.normal(size=(3, 6, 4, 4))
    batched = dependencies_forward(Tensor(x), w).data
    for r in range(3):
        np.testing.assert_allclose(batched[r], dependencies_forward(Tensor(x[r]), w).data, atol=1e-12)


def test_intermediate_shapes_full_size():
    rng = np.random.default_rng(0)
    w = _weights(rng, c=512, inner=256, scale=0.01)
    out, att, inner = dependencies_forward(Tensor(rng.normal(size=(512, 14, 14))), w, return_attention=True)
    assert out.shape == (512, 14, 14)
    assert att.shape == (196, 196)
    for name in ("f", "g", "h"):
        assert inner[name].shape == (1, 256, 196)  # 256 x 14 x 14 flattened


def test_shape_mismatch_rejected(rng):
    w = _weights(rng)
    with pytest.raises(ShapeError):
        dependencies_forward(Tensor(rng.normal(size=(5, 4, 4))), w)
    with pytest.raises(ShapeError):
        DCWeights(w.W_f, w.W_g, w.W_h, Tensor(np.zeros((6, 2, 1, 1))))


def test_attach_dc_preserves_origin_and_rejects_b(rng):
    w = _weights(rng)
    t = Tensor(rng.normal(size=(2, 6, 4, 4)))
    out = attach_dc(FusedDescriptor(t, "R"), w)
    assert out.origin == "R" and out.tensor.shape == t.shape
    with pytest.raises(ValueError):
        attach_dc(FusedDescriptor(t, "B"), w)
    assert attach_dc(FusedDescriptor(t, "B"), w, allow_b=True).origin == "B"


def test_attach_dc_zero_wz_identity(rng):
    w = _weights(rng)
    w.W_z.data[...] = 0.0
    t = Tensor(rng.normal(size=(2, 6, 4, 4)))
    np.testing.assert_array_equal(attach_dc(FusedDescriptor(t, "R"), w).tensor.data, t.data)


def test_residual_vanishes_with_wz(rng):
    w = _weights(rng)
    x = rng.normal(size=(6, 4, 4))
    base = w.W_z.data.copy()
    gaps = []
    for s in (1.0, 0.1, 0.01):
        w.W_z.data = base * s
        gaps.append(np.linalg.norm(dependencies_forward(Tensor(x), w).data - x))
    assert gaps[0] > gaps[1] > gaps[2]
    np.testing.assert_allclose(gaps[1] / gaps[0], 0.1, rtol=1e-9)
