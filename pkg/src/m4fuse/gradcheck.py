"""Central finite-difference audit of autograd gradients in float64."""

from __future__ import annotations

import contextlib
import time
from typing import Callable

import torch
import torch.nn.functional as F

from m4fuse import bridge as bridge_mod
from m4fuse import network as network_mod
from m4fuse.network import NetworkConfig, build
from m4fuse.train import backward, loss

FD_STEP = 1e-3
REL_TOL = 1e-3
# below this magnitude both sides are treated as zero (e.g. conv bias feeding a norm)
ABS_FLOOR = 1e-6
MIN_STEP = 1e-6


@contextlib.contextmanager
def selection_recorder():
    """Record which entries every max-pool window and channel max selects.

    Central differences are only meaningful when ``f(p + h v)`` and
    ``f(p - h v)`` sit on the same piece of these piecewise-smooth maxima.
    """
    picks: list[torch.Tensor] = []
    orig_pool, orig_cmax = network_mod.pool, bridge_mod.channel_max

    def pool(v):
        out, idx = F.max_pool3d(v, 2, 2, return_indices=True)
        picks.append(idx)
        return out

    def channel_max(t):
        out, idx = t.max(dim=1, keepdim=True)
        picks.append(idx)
        return out

    network_mod.pool, bridge_mod.channel_max = pool, channel_max
    try:
        yield picks
    finally:
        network_mod.pool, bridge_mod.channel_max = orig_pool, orig_cmax


def _same_selection(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def relative_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def directional_check(
    f: Callable[[], torch.Tensor],
    param: torch.Tensor,
    grad: torch.Tensor,
    direction: torch.Tensor,
    h: float = FD_STEP,
) -> tuple[float, float]:
    """Compare ``<grad, v>`` with ``(f(p + h v) - f(p - h v)) / 2h``; restores ``param``."""
    with torch.no_grad():
        saved = param.detach().clone()
        param.add_(h * direction)
        plus = float(f())
        param.copy_(saved - h * direction)
        minus = float(f())
        param.copy_(saved)
    return float((grad * direction).sum()), (plus - minus) / (2 * h)


def kink_aware_check(
    f: Callable[[], torch.Tensor],
    param: torch.Tensor,
    grad: torch.Tensor,
    direction: torch.Tensor,
    h: float = FD_STEP,
    tol: float = REL_TOL,
) -> dict:
    """Directional check at step ``h``; on failure, retry with ``h / 10`` only while
    the +h / -h evaluations select different max entries (a kink was crossed)."""
    while True:
        with selection_recorder() as picks:
            analytic, numeric = directional_check(f, param, grad, direction, h)
        half = len(picks) // 2
        crossed = not _same_selection(picks[:half], picks[half:])
        err = relative_error(analytic, numeric)
        if err < tol or not crossed or h / 10 < MIN_STEP:
            return {"analytic": analytic, "numeric": numeric, "rel_error": err, "step": h,
                    "kink_crossed": crossed}
        h /= 10


def tiny_config(**overrides) -> NetworkConfig:
    cfg = dict(
        variant="custom",
        max_channels=8,
        channel_schedule=(8, 8, 8, 8, 8),
        state_dim=4,
        num_experts=2,
        top_k=1,
        dropout_p=0.0,
        id_table={"a": 1, "b": 2},
        seed=0,
    )
    cfg.update(overrides)
    return NetworkConfig(**cfg)


def audit_model(cfg: NetworkConfig | None = None, shape=(1, 4, 32, 32, 32), seed: int = 0,
                h: float = FD_STEP) -> list[dict]:
    """Check every trainable parameter tensor along one random unit direction.

    Returns one record per tensor with the analytic and numeric directional
    derivatives, their relative error, and the step actually used.
    """
    cfg = cfg or tiny_config()
    gen = torch.Generator().manual_seed(seed)
    model = build(cfg).double()
    x = torch.randn(shape, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, cfg.num_classes, (shape[0],) + tuple(shape[2:]), generator=gen)
    ids = list(cfg.id_table)[: shape[0]] if cfg.id_table else None
    if ids is not None and len(ids) < shape[0]:
        ids = (ids * shape[0])[: shape[0]]

    def f():
        return loss(model(x, ids, training=False), labels)

    grads = backward(model, f())
    params = dict(model.named_parameters())
    records = []
    for name, g in grads.items():
        v = torch.randn(g.shape, generator=gen, dtype=torch.float64)
        v /= v.norm()
        t0 = time.perf_counter()
        rec = kink_aware_check(f, params[name], g, v, h)
        rec.update(name=name, seconds=time.perf_counter() - t0)
        records.append(rec)
    return records
