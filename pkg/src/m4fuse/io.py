"""Binary formats: M4FV volumes and the named-tensor checkpoint container.

M4FV layout: ``b"M4FV"``, u8 version (1), u8 rank, ``rank`` u32 little-endian
dims, then the little-endian float32 payload in row-major order. Volumes are
rank 5; checkpoint records reuse the same layout with any rank (0-5).

Checkpoint layout: ``b"M4FC"``, u8 version (1), u32 length + UTF-8 JSON config,
u32 length + UTF-8 fingerprint, u32 record count, then per record a u32 length +
UTF-8 name followed by one M4FV record.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

from m4fuse.errors import DataError, ShapeError

VOLUME_MAGIC = b"M4FV"
CHECKPOINT_MAGIC = b"M4FC"
VERSION = 1


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def write_record(f: BinaryIO, array: np.ndarray | torch.Tensor) -> None:
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.ascontiguousarray(array, dtype="<f4")
    f.write(VOLUME_MAGIC)
    f.write(struct.pack("<BB", VERSION, array.ndim))
    f.write(struct.pack(f"<{array.ndim}I", *array.shape))
    f.write(array.tobytes(order="C"))


def read_record(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != VOLUME_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    version, rank = struct.unpack("<BB", _read_exact(f, 2))
    if version != VERSION:
        raise DataError(f"unsupported M4FV version {version}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(f, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def write_volume(path: str | Path, volume: np.ndarray | torch.Tensor) -> None:
    if volume.ndim != 5:
        raise ShapeError(f"M4FV volumes are rank 5, got shape {tuple(volume.shape)}")
    with open(path, "wb") as f:
        write_record(f, volume)


def read_volume(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_record(f)
    if arr.ndim != 5:
        raise ShapeError(f"{path}: expected a rank-5 volume, found rank {arr.ndim}")
    return arr


def _write_str(f: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def config_fingerprint(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def write_checkpoint(path: str | Path, config: dict, tensors: dict[str, torch.Tensor]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", VERSION))
        _write_str(f, json.dumps(config, sort_keys=True))
        _write_str(f, config_fingerprint(config))
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            _write_str(f, name)
            write_record(f, t)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<B", _read_exact(f, 1))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(_read_str(f))
        fingerprint = _read_str(f)
        if fingerprint != config_fingerprint(config):
            raise DataError(f"{path}: config fingerprint mismatch")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name = _read_str(f)
            tensors[name] = read_record(f)
    return config, tensors
