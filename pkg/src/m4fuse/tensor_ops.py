"""Primitive volume operations.

Volumes are ``torch.Tensor`` objects of shape ``(B, C, D, H, W)``; a contiguous
tensor in that shape is exactly the row-major buffer with W fastest. Sequences
are ``(B, L, C)`` with ``L = D*H*W`` in raster order (D-major, W-fastest).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from m4fuse.errors import ShapeError

NORM_EPS = 1e-5


def _check_volume(v: torch.Tensor, name: str = "volume") -> None:
    if v.dim() != 5:
        raise ShapeError(f"{name} must be rank 5 (B, C, D, H, W), got shape {tuple(v.shape)}")
    if any(s < 1 for s in v.shape):
        raise ShapeError(f"{name} has an empty dimension: {tuple(v.shape)}")


def to_sequence(v: torch.Tensor) -> torch.Tensor:
    _check_volume(v)
    b, c = v.shape[:2]
    return v.reshape(b, c, -1).transpose(1, 2)


def to_volume(s: torch.Tensor, dims: tuple[int, int, int]) -> torch.Tensor:
    if s.dim() != 3:
        raise ShapeError(f"sequence must be rank 3 (B, L, C), got shape {tuple(s.shape)}")
    d, h, w = dims
    b, length, c = s.shape
    if length != d * h * w:
        raise ShapeError(f"sequence length {length} does not match D*H*W = {d}*{h}*{w}")
    return s.transpose(1, 2).reshape(b, c, d, h, w)


def layer_norm(s: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Normalize each sequence position over its channels, then apply a per-channel affine."""
    c = s.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm affine must have length {c}")
    return F.layer_norm(s, (c,), gain, bias, eps)


def group_norm(
    v: torch.Tensor, groups: int, gain: torch.Tensor, bias: torch.Tensor, eps: float = NORM_EPS
) -> torch.Tensor:
    _check_volume(v)
    c = v.shape[1]
    if groups < 1 or c % groups:
        raise ShapeError(f"{c} channels are not divisible into {groups} groups")
    return F.group_norm(v, groups, gain, bias, eps)


def conv3d(
    v: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation (no kernel flip) with a (C_out, C_in, kd, kh, kw) kernel."""
    _check_volume(v)
    if kernel.dim() != 5 or kernel.shape[1] != v.shape[1]:
        raise ShapeError(
            f"kernel {tuple(kernel.shape)} does not match input with {v.shape[1]} channels"
        )
    for size, k in zip(v.shape[2:], kernel.shape[2:]):
        if size + 2 * padding < k:
            raise ShapeError(f"kernel {tuple(kernel.shape[2:])} larger than padded input {tuple(v.shape[2:])}")
    return F.conv3d(v, kernel, bias, stride=stride, padding=padding)


def pool(v: torch.Tensor) -> torch.Tensor:
    """2x2x2 max pooling with stride 2; odd trailing voxels are dropped."""
    _check_volume(v)
    if min(v.shape[2:]) < 2:
        raise ShapeError(f"cannot pool spatial dims {tuple(v.shape[2:])}: every dim must be >= 2")
    return F.max_pool3d(v, kernel_size=2, stride=2)


def upsample(v: torch.Tensor) -> torch.Tensor:
    """Trilinear x2 upsampling with half-voxel sample centers (align_corners=False)."""
    _check_volume(v)
    return F.interpolate(v, scale_factor=2, mode="trilinear", align_corners=False)
