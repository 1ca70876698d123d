"""RFLW checkpoint format.

Layout (little-endian)::

    "RFLW" | version u32 | levels, flows_per_level, patch_edge, in_channels,
    coupling_hidden as u32 | scale_clamp f64 | tensor count u32 |
    per tensor: name length u16, UTF-8 name, rank u8, dims u32 x rank, f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .flow import FlowConfig, Glow3D

MAGIC = b"RFLW"
VERSION = 1
_CONFIG = struct.Struct("<4sI5Id")


class CheckpointError(ValueError):
    pass


def model_to_bytes(model: Glow3D) -> bytes:
    cfg = model.cfg
    parts = [_CONFIG.pack(MAGIC, VERSION, cfg.levels, cfg.flows_per_level, cfg.patch_edge,
                          cfg.in_channels, cfg.coupling_hidden, cfg.scale_clamp)]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> Glow3D:
    if len(data) < _CONFIG.size + 4:
        raise CheckpointError("checkpoint truncated in header")
    magic, version, *ints, clamp = _CONFIG.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = FlowConfig(*ints, scale_clamp=clamp)
    model = Glow3D(cfg)
    expected = model.state_dict()
    off = _CONFIG.size
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    if count != len(expected):
        raise CheckpointError(f"checkpoint has {count} tensors, config implies {len(expected)}")
    loaded = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(data):
                raise CheckpointError(f"tensor {name!r} truncated")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            if name not in expected or name in loaded:
                raise CheckpointError(f"unexpected or repeated tensor {name!r}")
            if tuple(expected[name].shape) != tuple(dims):
                raise CheckpointError(
                    f"tensor {name!r} has shape {dims}, expected {tuple(expected[name].shape)}"
                )
            loaded[name] = torch.from_numpy(arr.copy()).to(expected[name].dtype)
    except struct.error as exc:
        raise CheckpointError(f"checkpoint truncated: {exc}") from exc
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after parameter table")
    model.load_state_dict(loaded)
    return model


def save_checkpoint(model: Glow3D, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_checkpoint(path) -> Glow3D:
    return model_from_bytes(Path(path).read_bytes())
