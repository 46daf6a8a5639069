"""Grouped state-space mixer.

Each channel group runs its own diagonal linear state-space recursion over the
raster-ordered voxel sequence, plus a scaled direct path. Group outputs are
concatenated, layer-normalized and projected to the output width.
"""

from __future__ import annotations

import math

import numba
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from m4fuse.errors import ParameterError, ShapeError
from m4fuse.tensor_ops import layer_norm, to_sequence, to_volume

SMALL_A = 1e-8


def inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def discretize(a: torch.Tensor, delta: torch.Tensor | float, b_in: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-order-hold discretization of a diagonal continuous system.

    Returns ``abar = exp(a*delta)`` and ``bbar = ((exp(a*delta) - 1) / a) * b_in``,
    using the ``delta * b_in`` limit where ``|a| < 1e-8``.
    """
    delta = torch.as_tensor(delta, dtype=a.dtype)
    if not bool(torch.all(delta > 0)):
        raise ParameterError(f"step size must be positive, got {delta.tolist()}")
    ad = a * delta
    abar = torch.exp(ad)
    small = a.abs() < SMALL_A
    safe_a = torch.where(small, torch.ones_like(a), a)
    # expm1 keeps precision for small a*delta
    gain = torch.where(small, delta * torch.ones_like(a), torch.expm1(ad) / safe_a)
    return abar, gain[:, None] * b_in


@numba.njit(cache=True)
def _scan_forward(x, abar, bbar, c_out):
    n_batch, length, width = x.shape
    n_state = abar.shape[0]
    y = np.zeros_like(x)
    h = np.empty((n_batch, length, n_state), dtype=x.dtype)
    state = np.zeros(n_state, dtype=x.dtype)
    for b in range(n_batch):
        state[:] = 0.0
        for k in range(length):
            for i in range(n_state):
                acc = abar[i] * state[i]
                for j in range(width):
                    acc += bbar[i, j] * x[b, k, j]
                state[i] = acc
                h[b, k, i] = acc
            for j in range(width):
                acc = 0.0
                for i in range(n_state):
                    acc += c_out[j, i] * state[i]
                y[b, k, j] = acc
    return y, h


@numba.njit(cache=True)
def _scan_backward(grad_y, x, abar, bbar, c_out, h):
    # adjoint state lam_k = c_out^T g_k + abar * lam_{k+1}, swept from k = L-1 down to 0
    n_batch, length, width = x.shape
    n_state = abar.shape[0]
    grad_x = np.zeros_like(x)
    grad_abar = np.zeros_like(abar)
    grad_bbar = np.zeros_like(bbar)
    grad_c = np.zeros_like(c_out)
    lam = np.zeros(n_state, dtype=x.dtype)
    for b in range(n_batch):
        lam[:] = 0.0
        for k in range(length - 1, -1, -1):
            for i in range(n_state):
                acc = abar[i] * lam[i]
                for j in range(width):
                    acc += c_out[j, i] * grad_y[b, k, j]
                    grad_c[j, i] += grad_y[b, k, j] * h[b, k, i]
                lam[i] = acc
                if k > 0:
                    grad_abar[i] += acc * h[b, k - 1, i]
                for j in range(width):
                    grad_bbar[i, j] += acc * x[b, k, j]
                    grad_x[b, k, j] += bbar[i, j] * acc
    return grad_x, grad_abar, grad_bbar, grad_c


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().contiguous().numpy()


class _Scan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, abar, bbar, c_out):
        y, h = _scan_forward(_np(x), _np(abar), _np(bbar), _np(c_out))
        h = torch.from_numpy(h)
        ctx.save_for_backward(x, abar, bbar, c_out, h)
        return torch.from_numpy(y)

    @staticmethod
    def backward(ctx, grad_y):
        x, abar, bbar, c_out, h = ctx.saved_tensors
        grads = _scan_backward(_np(grad_y), _np(x), _np(abar), _np(bbar), _np(c_out), _np(h))
        return tuple(torch.from_numpy(g) for g in grads)


def ssm_scan(x: torch.Tensor, abar: torch.Tensor, bbar: torch.Tensor, c_out: torch.Tensor) -> torch.Tensor:
    """Causal diagonal state-space scan with post-update readout.

    ``x`` is (B, L, C/g); ``abar`` (d,), ``bbar`` (d, C/g), ``c_out`` (C/g, d).
    For each position ``h <- abar*h + bbar @ x_k`` then ``y_k = c_out @ h``.
    """
    if x.dim() != 3:
        raise ShapeError(f"scan input must be (B, L, C/g), got {tuple(x.shape)}")
    d = abar.shape[0]
    if bbar.shape != (d, x.shape[-1]) or c_out.shape != (x.shape[-1], d):
        raise ShapeError(
            f"inconsistent scan shapes: x {tuple(x.shape)}, abar {tuple(abar.shape)}, "
            f"bbar {tuple(bbar.shape)}, c_out {tuple(c_out.shape)}"
        )
    return _Scan.apply(x.contiguous(), abar, bbar, c_out)


def kappa_bound(abar, bbar, c_out, horizon: int) -> float:
    """Gain bound ``||C|| * sum_{t<L} ||Abar||^t * ||Bbar||`` of one group's scan."""
    abar = np.asarray(abar, dtype=np.float64)
    a_mat = np.diag(abar) if abar.ndim == 1 else abar
    na, nb, nc = (float(np.linalg.norm(np.atleast_2d(np.asarray(m, dtype=np.float64)), 2)) for m in (a_mat, bbar, c_out))
    if na == 1.0:
        series = float(horizon)
    else:
        series = (1.0 - na**horizon) / (1.0 - na)
    return nc * series * nb


class SSMGroup(nn.Module):
    """Parameters of one channel group: diagonal A, input map B, readout C, step size.

    ``a = -exp(log_neg_a)`` keeps every continuous pole at or below zero.
    """

    def __init__(self, width: int, state_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.width = width
        self.state_dim = state_dim
        bound = 1.0 / math.sqrt(state_dim)
        self.log_neg_a = nn.Parameter(torch.linspace(math.log(0.25), math.log(4.0), state_dim))
        self.b_in = nn.Parameter((torch.rand(state_dim, width, generator=generator) * 2 - 1) * bound)
        self.c_out = nn.Parameter((torch.rand(width, state_dim, generator=generator) * 2 - 1) * bound)
        self.delta_raw = nn.Parameter(torch.tensor(inv_softplus(0.01)))

    @property
    def a(self) -> torch.Tensor:
        return -torch.exp(self.log_neg_a)

    @property
    def delta(self) -> torch.Tensor:
        return F.softplus(self.delta_raw)

    def discretized(self) -> tuple[torch.Tensor, torch.Tensor]:
        return discretize(self.a, self.delta, self.b_in)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        abar, bbar = self.discretized()
        return ssm_scan(x, abar, bbar, self.c_out)


class PetaloMixer(nn.Module):
    """Grouped state-space mixer mapping (B, C_in, D, H, W) to (B, C_out, D, H, W)."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        groups: int = 4,
        state_dim: int = 16,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if groups < 1 or c_in % groups:
            raise ShapeError(f"{c_in} channels cannot be split into {groups} groups")
        self.c_in, self.c_out, self.n_groups = c_in, c_out, groups
        width = c_in // groups
        self.ln_in_gain = nn.Parameter(torch.ones(c_in))
        self.ln_in_bias = nn.Parameter(torch.zeros(c_in))
        self.groups = nn.ModuleList(SSMGroup(width, state_dim, generator) for _ in range(groups))
        self.s_raw = nn.Parameter(torch.tensor(inv_softplus(1.0)))
        self.ln_out_gain = nn.Parameter(torch.ones(c_in))
        self.ln_out_bias = nn.Parameter(torch.zeros(c_in))
        bound = 1.0 / math.sqrt(c_in)
        self.proj = nn.Parameter((torch.rand(c_in, c_out, generator=generator) * 2 - 1) * bound)
        self.calls = 0

    @property
    def s(self) -> torch.Tensor:
        return F.softplus(self.s_raw)

    def group_outputs(self, x_seq: torch.Tensor) -> list[torch.Tensor]:
        """Per-group ``scan(X_j) + s * X_j`` on an already-normalized sequence."""
        chunks = torch.chunk(x_seq, self.n_groups, dim=-1)
        s = self.s
        return [grp(chunk) + s * chunk for grp, chunk in zip(self.groups, chunks)]

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.dim() != 5 or v.shape[1] != self.c_in:
            raise ShapeError(f"mixer expects {self.c_in} input channels, got shape {tuple(v.shape)}")
        self.calls += 1
        dims = tuple(v.shape[2:])
        x = layer_norm(to_sequence(v), self.ln_in_gain, self.ln_in_bias)
        z = torch.cat(self.group_outputs(x), dim=-1)
        z = layer_norm(z, self.ln_out_gain, self.ln_out_bias)
        return to_volume(z @ self.proj, dims)
