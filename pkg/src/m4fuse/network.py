"""Full encoder / bridge / decoder assembly and parameter accounting."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from m4fuse.bridge import MODES, CSBridge
from m4fuse.errors import ConfigError, ShapeError
from m4fuse.experts import ExpertBank, route_from_ids
from m4fuse.mixer import PetaloMixer
from m4fuse.tensor_ops import pool, upsample

VARIANTS = {"T": 128, "S": 196, "B": 256, "L": 384}
NUM_SCALES = 5


@dataclass
class NetworkConfig:
    variant: str = "B"
    max_channels: int | None = None
    channel_schedule: tuple[int, ...] | None = None
    in_channels: int = 4
    num_classes: int = 4
    groups: int = 4
    state_dim: int = 128
    gn_groups: int = 4
    encoder_convs: int = 2
    expert_kernel: int = 1
    num_experts: int = 1
    top_k: int = 1
    dropout_p: float = 0.0
    id_table: dict = field(default_factory=dict)
    decoder_width_multiplier: float = 1.0
    bridge_mode: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.max_channels is None:
            if self.variant not in VARIANTS:
                raise ConfigError(f"unknown variant {self.variant!r}; give max_channels for custom builds")
            self.max_channels = VARIANTS[self.variant]
        if self.channel_schedule is not None:
            self.channel_schedule = tuple(int(c) for c in self.channel_schedule)

    def widths(self) -> tuple[int, ...]:
        if self.channel_schedule is not None:
            return self.channel_schedule
        g = self.groups
        ramp = [self.max_channels / 2 ** (NUM_SCALES - 1 - i) for i in range(NUM_SCALES)]
        widths = [max(g, g * round(c / g)) for c in ramp[:-1]]
        return tuple(widths + [self.max_channels])

    def validate(self) -> None:
        w = self.widths()
        if len(w) != NUM_SCALES:
            raise ConfigError(f"channel schedule needs {NUM_SCALES} widths, got {len(w)}")
        if w[-1] != self.max_channels:
            raise ConfigError(f"last width {w[-1]} must equal max_channels {self.max_channels}")
        if any(b < a for a, b in zip(w, w[1:])):
            raise ConfigError(f"encoder widths must be nondecreasing: {w}")
        for c in w:
            if c % self.groups or c % self.gn_groups:
                raise ConfigError(f"width {c} not divisible by groups={self.groups} / gn_groups={self.gn_groups}")
        if self.bridge_mode not in MODES:
            raise ConfigError(f"bridge_mode must be one of {MODES}")
        if self.decoder_width_multiplier <= 0:
            raise ConfigError("decoder_width_multiplier must be positive")
        if self.num_experts and not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} outside 1..{self.num_experts}")
        if self.encoder_convs < 1:
            raise ConfigError("encoder_convs must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_schedule"] = list(self.channel_schedule) if self.channel_schedule else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def _uniform(shape, bound, generator):
    return (torch.rand(shape, generator=generator) * 2 - 1) * bound


class Conv(nn.Module):
    def __init__(self, c_in, c_out, kernel, generator, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * kernel**3)
        self.weight = nn.Parameter(_uniform((c_out, c_in, kernel, kernel, kernel), bound, generator))
        self.bias = nn.Parameter(_uniform((c_out,), bound, generator)) if bias else None
        self.padding = kernel // 2

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, padding=self.padding)


class GroupNorm(nn.Module):
    def __init__(self, channels, groups):
        super().__init__()
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return F.group_norm(x, self.groups, self.weight, self.bias, 1e-5)


class ConvStage(nn.Module):
    """``n`` 3x3x3 convs with GN + SiLU between them (the wrapping GN lives outside)."""

    def __init__(self, c_in, c_out, n, gn_groups, generator):
        super().__init__()
        layers = [Conv(c_in, c_out, 3, generator)]
        for _ in range(n - 1):
            layers += [GroupNorm(c_out, gn_groups), nn.SiLU(), Conv(c_out, c_out, 3, generator)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class DecoderStage(nn.Module):
    """``Up(GN(op(y)))``; widened stages project back to the skip width before GN."""

    def __init__(self, op: nn.Module, width: int, target: int, gn_groups: int, generator):
        super().__init__()
        self.op = op
        self.reduce = Conv(width, target, 1, generator, bias=False) if width != target else None
        self.norm = GroupNorm(target, gn_groups)

    def forward(self, y):
        y = self.op(y)
        if self.reduce is not None:
            y = self.reduce(y)
        return upsample(self.norm(y))


class M4Fuse(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        c1, c2, c3, c4, c5 = cfg.widths()
        n, gg = cfg.encoder_convs, cfg.gn_groups

        def bank(c_in, c_out):
            return ExpertBank(c_in, c_out, cfg.num_experts, cfg.top_k, cfg.dropout_p,
                              cfg.expert_kernel, gg, gen)

        self.encoder = nn.ModuleDict(
            {
                "stage1": ConvStage(cfg.in_channels, c1, n, gg, gen),
                "norm1": GroupNorm(c1, gg),
                "stage2": ConvStage(c1, c2, n, gg, gen),
                "norm2": GroupNorm(c2, gg),
                "stage3": ConvStage(c2, c3, n, gg, gen),
                "norm3": GroupNorm(c3, gg),
                "peu4": bank(c3, c4),
                "norm4": GroupNorm(c4, gg),
                "peu5": bank(c4, c5),
                "norm5": GroupNorm(c5, gg),
                "peu_b": bank(c5, c5),
            }
        )
        self.bridge = CSBridge((c1, c2, c3, c4, c5), cfg.bridge_mode, gen)

        m = cfg.decoder_width_multiplier

        def wide(c):
            return max(cfg.groups, cfg.groups * round(m * c / cfg.groups))

        self.decoder = nn.ModuleList(
            [
                DecoderStage(PetaloMixer(c5, wide(c5), cfg.groups, cfg.state_dim, gen), wide(c5), c5, gg, gen),
                DecoderStage(PetaloMixer(c5, wide(c4), cfg.groups, cfg.state_dim, gen), wide(c4), c4, gg, gen),
                DecoderStage(PetaloMixer(c4, wide(c3), cfg.groups, cfg.state_dim, gen), wide(c3), c3, gg, gen),
                DecoderStage(Conv(c3, wide(c2), 3, gen), wide(c2), c2, gg, gen),
                DecoderStage(Conv(c2, wide(c1), 3, gen), wide(c1), c1, gg, gen),
            ]
        )
        self.head = Conv(c1, cfg.num_classes, 1, gen)

    @property
    def mixers(self) -> list[PetaloMixer]:
        return [stage.op for stage in self.decoder if isinstance(stage.op, PetaloMixer)]

    def reset_counters(self) -> None:
        self.bridge.calls = 0
        for mixer in self.mixers:
            mixer.calls = 0

    def route(self, ids: Sequence | None, batch: int) -> list[list[int]] | None:
        if self.cfg.num_experts == 0:
            return None
        if ids is None:
            if self.cfg.num_experts == 1 and self.cfg.top_k == 1:
                return [[1]] * batch
            raise ShapeError("dataset ids are required to route between several experts")
        if len(ids) != batch:
            raise ShapeError(f"got {len(ids)} ids for a batch of {batch}")
        return route_from_ids(ids, self.cfg.num_experts, self.cfg.id_table or None)

    def forward(
        self,
        x: torch.Tensor,
        ids: Sequence | None = None,
        training: bool = False,
        generator: torch.Generator | None = None,
        return_features: bool = False,
    ):
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (B, {self.cfg.in_channels}, D, H, W) input, got {tuple(x.shape)}")
        if any(s % 32 for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by 32")
        route = self.route(ids, x.shape[0])
        enc = self.encoder

        t1 = enc["norm1"](enc["stage1"](x))
        t2 = enc["norm2"](enc["stage2"](pool(t1)))
        t3 = enc["norm3"](enc["stage3"](pool(t2)))
        t4 = enc["norm4"](enc["peu4"](pool(t3), route, training, generator))
        t5 = enc["norm5"](enc["peu5"](pool(t4), route, training, generator))
        b = enc["peu_b"](pool(t5), route, training, generator)

        skips = self.bridge([t1, t2, t3, t4, t5])
        y = b
        for stage, skip in zip(self.decoder, reversed(skips)):
            y = stage(y) + skip
        logits = self.head(y)
        if return_features:
            return logits, {"t": [t1, t2, t3, t4, t5], "b": b, "skips": skips}
        return logits


def build(cfg: NetworkConfig) -> M4Fuse:
    return M4Fuse(cfg)


def param_report(model: M4Fuse) -> dict:
    """Split parameters into encoder / decoder / else (bridge + head) buckets."""
    buckets = {"encoder": 0, "decoder": 0, "else": 0}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        key = top if top in ("encoder", "decoder") else "else"
        buckets[key] += p.numel()
    total = sum(buckets.values())
    return {
        "total": total,
        **{k: {"count": v, "percent": 100.0 * v / total} for k, v in buckets.items()},
    }
