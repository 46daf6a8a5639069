"""Cross-scale dual-stage gating bridge for encoder skip features."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from m4fuse.errors import ConfigError, ShapeError
from m4fuse.mixer import inv_softplus
from m4fuse.tensor_ops import conv3d

MODES = ("full", "spatial_only", "channel_only", "off")
SPATIAL_KERNEL = 7


def gate(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def channel_max(t: torch.Tensor) -> torch.Tensor:
    return t.amax(dim=1, keepdim=True)


def spatial_gate(
    t: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(mask, mask * t)`` where ``mask = sigmoid(conv7([mean_c(t), max_c(t)]))``."""
    stats = torch.cat([t.mean(dim=1, keepdim=True), channel_max(t)], dim=1)
    mask = gate(conv3d(stats, kernel, bias, padding=kernel.shape[-1] // 2))
    return mask, mask * t


def channel_gates(
    gated: Sequence[torch.Tensor], weights: Sequence[torch.Tensor], biases: Sequence[torch.Tensor]
) -> list[torch.Tensor]:
    """Per-scale channel gates ``sigmoid(z @ W_s + b_s)`` from the concatenated GAP statistics."""
    z = torch.cat([t.mean(dim=(2, 3, 4)) for t in gated], dim=1)
    gates = []
    for w, b in zip(weights, biases):
        if w.shape[0] != z.shape[1]:
            raise ShapeError(f"gate weight expects {w.shape[0]} pooled channels, got {z.shape[1]}")
        gates.append(gate(z @ w + b))
    return gates


class CSBridge(nn.Module):
    def __init__(self, channels: Sequence[int], mode: str = "full", generator: torch.Generator | None = None):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"bridge mode must be one of {MODES}, got {mode!r}")
        self.channels = list(channels)
        self.mode = mode
        total = sum(self.channels)
        k = SPATIAL_KERNEL
        fan_in = 2 * k**3
        bound = 1.0 / math.sqrt(fan_in)
        self.spatial_kernel = nn.Parameter((torch.rand(1, 2, k, k, k, generator=generator) * 2 - 1) * bound)
        self.spatial_bias = nn.Parameter(torch.zeros(1))
        bound = 1.0 / math.sqrt(total)
        self.gate_weights = nn.ParameterList(
            nn.Parameter((torch.rand(total, c, generator=generator) * 2 - 1) * bound) for c in self.channels
        )
        self.gate_biases = nn.ParameterList(nn.Parameter(torch.zeros(c)) for c in self.channels)
        self.alpha_raw = nn.Parameter(torch.tensor(inv_softplus(0.1)))
        self.beta_raw = nn.Parameter(torch.tensor(inv_softplus(0.1)))
        self.calls = 0

    @property
    def alpha(self) -> torch.Tensor:
        return F.softplus(self.alpha_raw)

    @property
    def beta(self) -> torch.Tensor:
        return F.softplus(self.beta_raw)

    def masks(self, scales: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return [spatial_gate(t, self.spatial_kernel, self.spatial_bias)[0] for t in scales]

    def forward(self, scales: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(scales) != len(self.channels):
            raise ShapeError(f"bridge expects {len(self.channels)} scales, got {len(scales)}")
        for t, c in zip(scales, self.channels):
            if t.shape[1] != c:
                raise ShapeError(f"scale with {t.shape[1]} channels where {c} expected")
        self.calls += 1
        if self.mode == "off":
            return list(scales)

        if self.mode == "channel_only":
            gated = list(scales)
        else:
            gated = [spatial_gate(t, self.spatial_kernel, self.spatial_bias)[1] for t in scales]

        out = []
        if self.mode == "spatial_only":
            alpha = self.alpha
            return [t + alpha * sp for t, sp in zip(scales, gated)]

        gates = channel_gates(gated, self.gate_weights, self.gate_biases)
        alpha = self.alpha if self.mode == "full" else torch.zeros((), dtype=scales[0].dtype)
        beta = self.beta
        for t, sp, g in zip(scales, gated, gates):
            out.append(t + alpha * sp + beta * (g[:, :, None, None, None] * sp))
        return out
