"""Plain-text run configuration.

Lines are ``key = value`` under ``[section]`` headers, or fully dotted keys
(``network.variant = B``) anywhere, including before the first header.
Values are read as JSON when possible (numbers, ``true``, ``{"site_a": 1}``);
comma-separated items become lists and anything else stays a string.

Sections: ``network`` (every NetworkConfig field), ``experts`` (``count``,
``top_k``, ``dropout``, ``kernel``, ``id_table``), ``bridge`` (``mode``),
``data`` (every SyntheticSpec field) and ``train`` (loop settings). A top-level
``seed`` seeds network, data and training together.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from pathlib import Path

from m4fuse.errors import ConfigError
from m4fuse.network import NetworkConfig
from m4fuse.synthetic import SyntheticSpec
from m4fuse.train import ToyConfig, toy_network

_TOP = "__top__"
EXPERT_KEYS = {"count": "num_experts", "top_k": "top_k", "dropout": "dropout_p",
               "kernel": "expert_kernel", "id_table": "id_table"}
BRIDGE_KEYS = {"mode": "bridge_mode"}
TRAIN_KEYS = {"epochs", "batch_size", "val_fraction", "base_lr", "min_lr", "weight_decay", "patience"}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    return text


def parse_text(text: str) -> dict[str, object]:
    """Flatten a config document into ``{"section.key": value}``."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_TOP}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    flat = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            full = key if section == _TOP else f"{section}.{key}"
            flat[full] = parse_value(raw)
    return flat


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def toy_config_from_flat(flat: dict[str, object], seed: int | None = None) -> ToyConfig:
    net: dict = {}
    data: dict = {}
    train: dict = {}
    net_fields, data_fields = _fields(NetworkConfig), _fields(SyntheticSpec)
    for full, value in flat.items():
        section, _, key = full.rpartition(".")
        if section == "" and key == "seed":
            net["seed"] = data["seed"] = train["seed"] = value
        elif section == "network" and key in net_fields:
            net[key] = value
        elif section == "experts" and key in EXPERT_KEYS:
            net[EXPERT_KEYS[key]] = value
        elif section == "bridge" and key in BRIDGE_KEYS:
            net[BRIDGE_KEYS[key]] = value
        elif section == "data" and key in data_fields:
            data[key] = value
        elif section == "train" and key in TRAIN_KEYS:
            train[key] = value
        else:
            raise ConfigError(f"unknown config key {full!r}")
    if net.get("variant", "custom") != "custom":
        # a named variant replaces the toy widths unless they are given explicitly
        net.setdefault("max_channels", None)
        net.setdefault("channel_schedule", None)
    if seed is not None:
        net["seed"] = data["seed"] = train["seed"] = seed
    try:
        network = toy_network(**net)
        spec = SyntheticSpec(**data)
        cfg = ToyConfig(network=network, data=spec, **train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    network.validate()
    return cfg


def load_config(path: str | Path | None = None, seed: int | None = None) -> ToyConfig:
    """Read a config file (or use defaults); ``seed`` overrides any seed in the file."""
    flat = {}
    if path is not None:
        try:
            flat = parse_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return toy_config_from_flat(flat, seed)
