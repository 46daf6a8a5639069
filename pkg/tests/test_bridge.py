import math

import numpy as np
import pytest
import torch

from m4fuse import bridge as bridge_mod
from m4fuse.bridge import CSBridge, channel_gates, spatial_gate
from m4fuse.errors import ConfigError, ShapeError
from m4fuse.tensor_ops import conv3d

CHANNELS = (2, 3, 4, 4, 5)


def scales(gen, batch=2):
    return [torch.randn(batch, c, n, n, n, generator=gen, dtype=torch.float64)
            for c, n in zip(CHANNELS, (16, 8, 4, 2, 1))]


def make(mode="full", seed=0):
    return CSBridge(CHANNELS, mode, torch.Generator().manual_seed(seed)).double()


def test_mask_in_open_unit_interval(gen):
    t = torch.randn(2, 3, 5, 5, 5, generator=gen, dtype=torch.float64)
    k = torch.randn(1, 2, 7, 7, 7, generator=gen, dtype=torch.float64)
    mask, gated = spatial_gate(t, k)
    assert mask.shape == (2, 1, 5, 5, 5)
    assert torch.all((mask > 0) & (mask < 1))
    assert torch.allclose(gated, mask * t)


def test_zero_kernel_gives_half_mask(gen):
    t = torch.randn(1, 3, 4, 4, 4, generator=gen, dtype=torch.float64)
    mask, gated = spatial_gate(t, torch.zeros(1, 2, 7, 7, 7, dtype=torch.float64),
                               torch.zeros(1, dtype=torch.float64))
    assert torch.all(mask == 0.5)
    assert torch.equal(gated, 0.5 * t)


def test_spatial_gate_composition(gen):
    t = torch.randn(1, 3, 4, 4, 4, generator=gen, dtype=torch.float64)
    k = torch.randn(1, 2, 7, 7, 7, generator=gen, dtype=torch.float64)
    b = torch.tensor([0.3], dtype=torch.float64)
    stats = torch.cat([t.mean(1, keepdim=True), t.max(1, keepdim=True).values], 1)
    expected = torch.sigmoid(conv3d(stats, k, b, padding=3))
    assert torch.allclose(spatial_gate(t, k, b)[0], expected, atol=1e-6)


def test_channel_gates_zero_weights(gen):
    gated = scales(gen)
    zeros = [torch.zeros(sum(CHANNELS), c, dtype=torch.float64) for c in CHANNELS]
    biases = [torch.zeros(c, dtype=torch.float64) for c in CHANNELS]
    gates = channel_gates(gated, zeros, biases)
    assert [g.shape for g in gates] == [(2, c) for c in CHANNELS]
    assert all(torch.all(g == 0.5) for g in gates)


def test_channel_gate_scalar_hand_case():
    # one scale with two channels whose GAP values are 0.3 and 0
    t = torch.zeros(1, 2, 2, 2, 2, dtype=torch.float64)
    t[:, 0] = 0.3
    w = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    (g,) = channel_gates([t], [w], [torch.zeros(1, dtype=torch.float64)])
    assert g.item() == pytest.approx(1 / (1 + math.exp(-0.3)))
    assert g.item() == pytest.approx(0.5744, abs=1e-4)


def test_channel_gates_width_mismatch(gen):
    with pytest.raises(ShapeError):
        channel_gates(scales(gen), [torch.zeros(3, c, dtype=torch.float64) for c in CHANNELS],
                      [torch.zeros(c, dtype=torch.float64) for c in CHANNELS])


def test_gates_strictly_inside(gen):
    br = make()
    with torch.no_grad():
        for w in br.gate_weights:
            w.mul_(30)
    gated = [spatial_gate(t, br.spatial_kernel, br.spatial_bias)[1] for t in scales(gen)]
    for g in channel_gates(gated, br.gate_weights, br.gate_biases):
        assert torch.all((g > 0) & (g < 1))


def test_zero_residual_weights_identity(gen):
    br = make()
    with torch.no_grad():
        br.alpha_raw.fill_(-math.inf)
        br.beta_raw.fill_(-math.inf)
    assert br.alpha.item() == 0.0 and br.beta.item() == 0.0
    ts = scales(gen)
    for out, t in zip(br(ts), ts):
        assert torch.equal(out, t)


@pytest.mark.parametrize("seed", range(20))
def test_pointwise_bound(seed):
    gen = torch.Generator().manual_seed(seed)
    br = make(seed=seed)
    with torch.no_grad():
        br.alpha_raw.normal_(generator=gen)
        br.beta_raw.normal_(generator=gen)
        br.spatial_kernel.mul_(10)
    ts = scales(gen)
    with torch.no_grad():
        bound = 1 + br.alpha + br.beta
        for out, t in zip(br(ts), ts):
            assert torch.all(out.abs() <= bound * t.abs() * (1 + 1e-12))


def test_ablation_modes_execute_and_differ(gen):
    ts = scales(gen)
    outs = {mode: make(mode)(ts) for mode in ("full", "spatial_only", "channel_only", "off")}
    for mode in ("spatial_only", "channel_only"):
        assert any(not torch.allclose(a, b) for a, b in zip(outs[mode], outs["full"]))
    assert all(torch.equal(a, b) for a, b in zip(outs["off"], ts))


def test_spatial_only_is_full_with_zero_beta(gen):
    ts = scales(gen)
    full = make("full")
    with torch.no_grad():
        full.beta_raw.fill_(-math.inf)
    for a, b in zip(full(ts), make("spatial_only")(ts)):
        assert torch.allclose(a, b)


def test_channel_only_uses_unit_mask(gen, monkeypatch):
    ts = scales(gen)
    full = make("full")
    with torch.no_grad():
        full.alpha_raw.fill_(-math.inf)
        full.spatial_kernel.zero_()
        full.spatial_bias.fill_(1e4)  # mask saturates at 1
    for a, b in zip(full(ts), make("channel_only")(ts)):
        assert torch.allclose(a, b)


def test_parameters_nonnegative_and_concat_width():
    br = make()
    with torch.no_grad():
        br.alpha_raw.fill_(-40)
        br.beta_raw.fill_(-40)
    assert br.alpha.item() >= 0 and br.beta.item() >= 0
    assert all(w.shape[0] == sum(CHANNELS) for w in br.gate_weights)


def test_bad_mode_and_scale_checks(gen):
    with pytest.raises(ConfigError):
        CSBridge(CHANNELS, "both")
    with pytest.raises(ShapeError):
        make()(scales(gen)[:4])


def test_gate_function_is_patchable(gen, monkeypatch):
    ts = scales(gen)
    base = make()(ts)
    monkeypatch.setattr(bridge_mod, "gate", lambda x: torch.ones_like(x))
    patched = make()(ts)
    assert not torch.allclose(base[0], patched[0])


def test_bridge_counts_calls(gen):
    br = make()
    br(scales(gen))
    assert br.calls == 1
