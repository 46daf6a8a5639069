import math

import pytest
import torch

from m4fuse.errors import ConfigError, RoutingError, ShapeError
from m4fuse.network import NetworkConfig, build, param_report


def small(**kw):
    cfg = dict(variant="custom", max_channels=16, channel_schedule=(8, 8, 16, 16, 16), state_dim=4)
    cfg.update(kw)
    return NetworkConfig(**cfg)


def test_variant_widths():
    assert NetworkConfig(variant="B").widths() == (16, 32, 64, 128, 256)
    for v, top in (("T", 128), ("S", 196), ("B", 256), ("L", 384)):
        w = NetworkConfig(variant=v).widths()
        assert w[-1] == top
        assert list(w) == sorted(w)
        assert all(c % 4 == 0 for c in w)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        build(small(channel_schedule=(8, 8, 16, 16, 12)))
    with pytest.raises(ConfigError):
        build(small(channel_schedule=(8, 6, 16, 16, 16)))
    with pytest.raises(ConfigError):
        build(small(channel_schedule=(8, 16, 8, 16, 16)))
    with pytest.raises(ConfigError):
        NetworkConfig(variant="XL")
    with pytest.raises(ConfigError):
        build(small(bridge_mode="half"))


def test_shape_contract(gen):
    model = build(small())
    for shape in ((1, 4, 32, 32, 32), (2, 4, 32, 64, 64)):
        out = model(torch.randn(shape, generator=gen))
        assert out.shape == (shape[0], 4) + shape[2:]


def test_divisibility_and_channels(gen):
    model = build(small())
    with pytest.raises(ShapeError):
        model(torch.randn(1, 4, 32, 32, 48))
    with pytest.raises(ShapeError):
        model(torch.randn(1, 3, 32, 32, 32))


def test_call_counts(gen):
    model = build(small())
    model(torch.randn(1, 4, 32, 32, 32, generator=gen))
    assert model.bridge.calls == 1
    assert len(model.mixers) == 3
    assert [m.calls for m in model.mixers] == [1, 1, 1]
    model.reset_counters()
    assert model.bridge.calls == 0


def test_feature_pyramid(gen):
    model = build(small())
    _, feats = model(torch.randn(1, 4, 32, 32, 32, generator=gen), return_features=True)
    sizes = [t.shape[2] for t in feats["t"]]
    assert sizes == [32, 16, 8, 4, 2]
    assert feats["b"].shape[2:] == (1, 1, 1)
    assert [t.shape[1] for t in feats["t"]] == [8, 8, 16, 16, 16]


def test_builds_are_bitwise_identical():
    a, b = build(small(seed=3)), build(small(seed=3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = build(small(seed=4))
    assert not torch.equal(next(a.parameters()), next(c.parameters()))


def test_forward_deterministic(gen):
    x = torch.randn(1, 4, 32, 32, 32, generator=gen)
    assert torch.equal(build(small())(x), build(small())(x))


def test_bridge_identity_equals_bridge_off(gen):
    x = torch.randn(1, 4, 32, 32, 32, generator=gen)
    full = build(small())
    with torch.no_grad():
        full.bridge.alpha_raw.fill_(-math.inf)
        full.bridge.beta_raw.fill_(-math.inf)
    off = build(small(bridge_mode="off"))
    assert torch.allclose(full(x), off(x), atol=1e-5)


def test_routing_through_network(gen):
    model = build(small(num_experts=2, id_table={"a": 1, "b": 2}))
    x = torch.randn(2, 4, 32, 32, 32, generator=gen)
    ab = model(x, ["a", "b"])
    aa = model(x, ["a", "a"])
    assert torch.equal(ab[0], aa[0])
    assert not torch.allclose(ab[1], aa[1])
    with pytest.raises(RoutingError):
        model(x, ["a", "z"])
    with pytest.raises(ShapeError):
        model(x, None)


def test_param_report_partition():
    report = param_report(build(small(num_experts=2, id_table={"a": 1, "b": 2})))
    assert report["encoder"]["count"] + report["decoder"]["count"] + report["else"]["count"] == report["total"]
    assert sum(report[k]["percent"] for k in ("encoder", "decoder", "else")) == pytest.approx(100.0)


def test_param_count_pure_function_of_config():
    cfg = NetworkConfig(variant="T", num_experts=2, id_table={"a": 1, "b": 2})
    a = build(cfg)
    b = build(NetworkConfig.from_dict(cfg.to_dict()))
    assert [p.shape for p in a.parameters()] == [p.shape for p in b.parameters()]


def test_variant_b_calibration():
    t1 = param_report(build(NetworkConfig()))["total"]
    report = param_report(build(NetworkConfig(num_experts=2, id_table={"a": 1, "b": 2})))
    assert abs(t1 - 1.11e6) <= 0.15 * 1.11e6
    assert abs(report["total"] - t1 - 0.12e6) <= 0.2 * 0.12e6
    for key, ref in (("encoder", 47.9), ("decoder", 30.0), ("else", 21.1)):
        assert abs(report[key]["percent"] - ref) <= 8.0


def test_variant_l_ratio():
    ratio = param_report(build(NetworkConfig(variant="L")))["total"] / param_report(build(NetworkConfig()))["total"]
    assert abs(ratio - 2.45 / 1.11) <= 0.2 * 2.45 / 1.11


def test_total_linear_in_expert_count():
    totals = [param_report(build(NetworkConfig(variant="T", num_experts=m,
                                               id_table={f"s{i}": i for i in range(1, m + 1)} if m > 1 else {})))["total"]
              for m in range(4)]
    diffs = {b - a for a, b in zip(totals, totals[1:])}
    assert len(diffs) == 1


def test_decoder_width_multiplier():
    base = param_report(build(NetworkConfig()))
    wide = param_report(build(NetworkConfig(decoder_width_multiplier=2)))
    assert wide["encoder"]["count"] == base["encoder"]["count"]
    assert 1.7 <= wide["decoder"]["count"] / base["decoder"]["count"] <= 2.3
    out = build(NetworkConfig(decoder_width_multiplier=2, variant="T"))(torch.randn(1, 4, 32, 32, 32))
    assert out.shape == (1, 4, 32, 32, 32)
