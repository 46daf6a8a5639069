import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from m4fuse import oracles
from m4fuse.errors import ShapeError
from m4fuse.tensor_ops import conv3d, group_norm, layer_norm, pool, to_sequence, to_volume, upsample


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_to_sequence_line():
    v = t([3.0, 7.0]).reshape(1, 1, 1, 1, 2)
    s = to_sequence(v)
    assert s.shape == (1, 2, 1)
    assert s.flatten().tolist() == [3.0, 7.0]


def test_to_sequence_channels_become_columns():
    v = t([[1.0, 2.0], [10.0, 20.0]]).reshape(1, 2, 1, 1, 2)
    assert to_sequence(v)[0].tolist() == [[1.0, 10.0], [2.0, 20.0]]


def test_sequence_raster_order():
    v = torch.arange(2 * 3 * 4 * 5, dtype=torch.float64).reshape(1, 2, 3, 4, 5)
    s = to_sequence(v)
    for i, j, k in [(0, 0, 0), (1, 2, 3), (2, 3, 4)]:
        assert s[0, i * 20 + j * 5 + k].tolist() == v[0, :, i, j, k].tolist()


@settings(max_examples=20, deadline=None)
@given(st.tuples(*[st.integers(1, 5)] * 5))
def test_sequence_roundtrip(shape):
    v = torch.randn(shape, dtype=torch.float64)
    assert torch.equal(to_volume(to_sequence(v), shape[2:]), v)


def test_to_volume_mismatch():
    with pytest.raises(ShapeError):
        to_volume(torch.zeros(1, 10, 2), (2, 2, 2))


def test_rank_checked():
    with pytest.raises(ShapeError):
        to_sequence(torch.zeros(2, 3, 4))


def test_layer_norm_constant_channels():
    s = torch.full((1, 3, 4), 2.5, dtype=torch.float64)
    out = layer_norm(s, torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
    assert torch.equal(out, torch.zeros_like(out))


def test_layer_norm_two_channels():
    out = layer_norm(t([[[1.0, 3.0]]]), t([1.0, 1.0]), t([0.0, 0.0]), eps=0.0)
    assert torch.allclose(out, t([[[-1.0, 1.0]]]))


def test_layer_norm_zero_gain_gives_bias():
    s = torch.randn(2, 5, 3, dtype=torch.float64)
    bias = t([0.1, -2.0, 3.0])
    out = layer_norm(s, torch.zeros(3, dtype=torch.float64), bias)
    assert torch.equal(out, bias.expand_as(out))


def test_layer_norm_oracle(rng):
    s = rng.normal(size=(2, 6, 5))
    gain, bias = rng.normal(size=5), rng.normal(size=5)
    out = layer_norm(t(s), t(gain), t(bias))
    np.testing.assert_allclose(out.numpy(), oracles.layer_norm_loops(s, gain, bias), atol=1e-10)


def test_group_norm_hand_case():
    v = t([[1.0, 3.0], [5.0, 9.0]]).reshape(1, 2, 1, 1, 2)
    out = group_norm(v, 1, torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), eps=0.0)
    std = math.sqrt(((1 - 4.5) ** 2 + (3 - 4.5) ** 2 + (5 - 4.5) ** 2 + (9 - 4.5) ** 2) / 4)
    assert std == pytest.approx(2.958, abs=1e-3)
    expected = (torch.tensor([1.0, 3.0, 5.0, 9.0], dtype=torch.float64) - 4.5) / std
    assert torch.allclose(out.flatten(), expected)


def test_group_norm_instance_case(rng):
    v = rng.normal(size=(2, 3, 2, 3, 4))
    out = group_norm(t(v), 3, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)).numpy()
    mu = v.mean(axis=(2, 3, 4), keepdims=True)
    var = v.var(axis=(2, 3, 4), keepdims=True)
    np.testing.assert_allclose(out, (v - mu) / np.sqrt(var + 1e-5), atol=1e-10)


def test_group_norm_constant_gives_bias():
    v = torch.full((1, 4, 2, 2, 2), 7.0, dtype=torch.float64)
    bias = t([1.0, 2.0, 3.0, 4.0])
    out = group_norm(v, 2, torch.ones(4, dtype=torch.float64), bias)
    assert torch.allclose(out, bias.reshape(1, 4, 1, 1, 1).expand_as(out))


def test_group_norm_oracle(rng):
    v = rng.normal(size=(2, 6, 3, 2, 2))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    out = group_norm(t(v), 2, t(gain), t(bias))
    np.testing.assert_allclose(out.numpy(), oracles.group_norm_loops(v, 2, gain, bias), atol=1e-10)


def test_group_norm_indivisible():
    with pytest.raises(ShapeError):
        group_norm(torch.zeros(1, 3, 2, 2, 2), 2, torch.ones(3), torch.zeros(3))


def test_conv_identity_kernel():
    v = torch.randn(1, 2, 3, 4, 5, dtype=torch.float64)
    k = torch.zeros(2, 2, 1, 1, 1, dtype=torch.float64)
    k[0, 0] = k[1, 1] = 1.0
    assert torch.equal(conv3d(v, k), v)


def test_conv_window_sum():
    out = conv3d(torch.ones(1, 1, 3, 3, 3), torch.ones(1, 1, 3, 3, 3))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == 27.0


@pytest.mark.parametrize("padding", [0, 1])
def test_conv_oracle(rng, padding):
    v = rng.normal(size=(1, 2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    out = conv3d(t(v), t(w), t(b), padding=padding).numpy()
    np.testing.assert_allclose(out, oracles.conv3d_loops(v, w, b, padding), atol=1e-6)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv3d(torch.zeros(1, 2, 3, 3, 3), torch.zeros(1, 3, 1, 1, 1))


def test_pool_constant():
    out = pool(torch.full((1, 2, 4, 6, 8), 3.0))
    assert out.shape == (1, 2, 2, 3, 4)
    assert torch.all(out == 3.0)


def test_pool_window_max():
    v = torch.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    assert pool(v).flatten().tolist() == [8.0]


def test_pool_idempotent_on_constant_regions():
    v = torch.full((1, 1, 8, 8, 8), -1.5)
    assert torch.equal(pool(pool(v)), torch.full((1, 1, 2, 2, 2), -1.5))


def test_pool_oracle(rng):
    v = rng.normal(size=(2, 2, 4, 6, 2))
    np.testing.assert_array_equal(pool(t(v)).numpy(), oracles.maxpool_loops(v))


def test_pool_too_small():
    with pytest.raises(ShapeError):
        pool(torch.zeros(1, 1, 1, 4, 4))


def test_upsample_constant():
    out = upsample(torch.full((1, 1, 2, 3, 1), 4.0, dtype=torch.float64))
    assert out.shape == (1, 1, 4, 6, 2)
    assert torch.allclose(out, torch.full_like(out, 4.0))


def test_pool_after_upsample_constant():
    v = torch.full((1, 2, 2, 2, 2), 0.25, dtype=torch.float64)
    assert torch.allclose(pool(upsample(v)), v)


def test_upsample_half_voxel_line():
    v = t([0.0, 2.0]).reshape(1, 1, 1, 1, 2)
    out = upsample(v)[0, 0, 0, 0]
    assert torch.allclose(out, t([0.0, 0.5, 1.5, 2.0]))


def test_upsample_oracle(rng):
    v = rng.normal(size=(1, 2, 3, 2, 4))
    np.testing.assert_allclose(upsample(t(v)).numpy(), oracles.upsample_loops(v), atol=1e-12)


def test_finite_outputs(rng):
    v = t(rng.normal(size=(1, 4, 4, 4, 4)))
    ones, zeros = torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)
    for out in (pool(v), upsample(v), group_norm(v, 2, ones, zeros), layer_norm(to_sequence(v), ones, zeros)):
        assert torch.isfinite(out).all()
