"""Shared-plus-expert unit with hard, identifier-driven sample routing."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from m4fuse.errors import ConfigError, RoutingError, ShapeError


def route_from_ids(ids: Sequence, num_experts: int, table: Mapping | None = None) -> list[list[int]]:
    """Map per-sample identifiers to 1-based expert indices via ``table``.

    With a single expert every sample routes to expert 1 and no table is needed.
    Returns one index list per sample (length 1 for top-1 routes).
    """
    if num_experts < 1:
        raise ConfigError("at least one expert is required")
    route = []
    for ident in ids:
        if num_experts == 1 and not table:
            route.append([1])
            continue
        if table is None or ident not in table:
            raise RoutingError(f"no expert mapped for dataset id {ident!r}")
        entry = table[ident]
        indices = [int(i) for i in (entry if isinstance(entry, (list, tuple)) else [entry])]
        for i in indices:
            if not 1 <= i <= num_experts:
                raise RoutingError(f"id {ident!r} maps to expert {i}, outside 1..{num_experts}")
        route.append(indices)
    return route


class ExpertBlock(nn.Module):
    """conv3d -> group norm -> SiLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 1, gn_groups: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.kernel = kernel
        self.gn_groups = gn_groups
        bound = 1.0 / math.sqrt(c_in * kernel**3)
        self.weight = nn.Parameter((torch.rand(c_out, c_in, kernel, kernel, kernel, generator=generator) * 2 - 1) * bound)
        self.bias = nn.Parameter((torch.rand(c_out, generator=generator) * 2 - 1) * bound)
        self.gn_gain = nn.Parameter(torch.ones(c_out))
        self.gn_bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.conv3d(x, self.weight, self.bias, padding=self.kernel // 2)
        return F.silu(F.group_norm(y, self.gn_groups, self.gn_gain, self.gn_bias, 1e-5))


class ExpertBank(nn.Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        num_experts: int = 1,
        top_k: int = 1,
        dropout_p: float = 0.0,
        kernel: int = 1,
        gn_groups: int = 4,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if num_experts < 0:
            raise ConfigError("expert count must be >= 0")
        if num_experts and not 1 <= top_k <= num_experts:
            raise ConfigError(f"top_k={top_k} must lie in 1..{num_experts}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"dropout p={dropout_p} outside [0, 1)")
        self.c_in, self.c_out = c_in, c_out
        self.top_k = top_k
        self.dropout_p = dropout_p
        self.shared = ExpertBlock(c_in, c_out, kernel, gn_groups, generator)
        self.experts = nn.ModuleList(
            ExpertBlock(c_in, c_out, kernel, gn_groups, generator) for _ in range(num_experts)
        )

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def forward(
        self,
        u: torch.Tensor,
        route: Sequence[Sequence[int]] | None,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        if u.shape[1] != self.c_in:
            raise ShapeError(f"expert bank expects {self.c_in} channels, got {u.shape[1]}")
        out = self.shared(u)
        if self.num_experts:
            if route is None or len(route) != u.shape[0]:
                raise ShapeError(f"route length {None if route is None else len(route)} != batch {u.shape[0]}")
            per_sample = []
            for i, chosen in enumerate(route):
                if len(chosen) != self.top_k:
                    raise RoutingError(f"sample {i} routed to {len(chosen)} experts, top_k is {self.top_k}")
                if any(not 1 <= m <= self.num_experts for m in chosen):
                    raise RoutingError(f"sample {i} route {list(chosen)} outside 1..{self.num_experts}")
                ui = u[i : i + 1]
                ys = [self.experts[m - 1](ui) for m in chosen]
                per_sample.append(torch.stack(ys).mean(dim=0))
            out = out + torch.cat(per_sample, dim=0)
        if training and self.dropout_p > 0:
            keep = 1.0 - self.dropout_p
            # drawn sample-major, voxel-minor
            mask = (torch.rand(out.shape, generator=generator, dtype=out.dtype) < keep).to(out.dtype)
            out = out * mask / keep
        return out

    def param_counts(self) -> tuple[int, int, int]:
        shared = sum(p.numel() for p in self.shared.parameters())
        per_expert = sum(p.numel() for p in self.experts[0].parameters()) if self.num_experts else 0
        total = sum(p.numel() for p in self.parameters())
        return shared, per_expert, total


def expert_param_count(bank: ExpertBank) -> tuple[int, int, int]:
    return bank.param_counts()
