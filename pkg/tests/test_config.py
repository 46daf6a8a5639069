import pytest

from m4fuse.config import load_config, parse_text, parse_value, toy_config_from_flat
from m4fuse.errors import ConfigError


def test_parse_values():
    assert parse_value("3") == 3
    assert parse_value("1e-4") == 1e-4
    assert parse_value("true") is True
    assert parse_value("B") == "B"
    assert parse_value("8, 8, 16") == [8, 8, 16]
    assert parse_value('{"a": 1}') == {"a": 1}


def test_sections_and_dotted_keys():
    flat = parse_text("seed = 4\nnetwork.state_dim = 8\n[train]\nepochs = 3\n[experts]\ncount = 2\n")
    assert flat == {"seed": 4, "network.state_dim": 8, "train.epochs": 3, "experts.count": 2}


def test_full_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# toy run\n"
        "seed = 7\n"
        "[network]\nstate_dim = 8\nchannel_schedule = 8, 8, 16, 16, 32\n"
        "[experts]\ncount = 2\ntop_k = 1\ndropout = 0.1\nid_table = {\"site_a\": 1, \"site_b\": 2}\n"
        "[bridge]\nmode = off\n"
        "[data]\ncount = 6\nshape = 32, 32, 32\nnoise = 0.5\n"
        "[train]\nepochs = 3\nbase_lr = 0.001\n"
    )
    cfg = load_config(path)
    assert cfg.seed == cfg.network.seed == cfg.data.seed == 7
    assert cfg.network.state_dim == 8 and cfg.network.num_experts == 2 and cfg.network.dropout_p == 0.1
    assert cfg.network.bridge_mode == "off"
    assert cfg.network.channel_schedule == (8, 8, 16, 16, 32)
    assert cfg.data.count == 6 and cfg.data.shape == (32, 32, 32) and cfg.data.noise == 0.5
    assert cfg.epochs == 3 and cfg.base_lr == 0.001
    assert load_config(path, seed=1).network.seed == 1


def test_named_variant_overrides_toy_widths():
    cfg = toy_config_from_flat({"network.variant": "T"})
    assert cfg.network.widths()[-1] == 128


def test_unknown_key():
    with pytest.raises(ConfigError, match="network.widthz"):
        toy_config_from_flat({"network.widthz": 3})


def test_malformed_and_missing(tmp_path):
    with pytest.raises(ConfigError):
        parse_text("[network\nstate_dim = 3")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
