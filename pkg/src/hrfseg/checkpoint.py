"""Flat binary model checkpoints.

Layout (all integers little-endian):

    magic     8 bytes  b"HRFSEGCK"
    version   u32      currently 1
    arch      u16 length + UTF-8 bytes
    out_mode  u16 length + UTF-8 bytes
    seed      u64      build seed of the stored model
    n_params  u32
    then, per parameter, in a fixed order:
    name      u16 length + UTF-8 bytes
    rank      u8
    dims      rank * u32
    data      prod(dims) * float32, little-endian, C order

Round-trips are bit-exact for float32 models (the training default);
float64 parameters are truncated to float32 on save.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .models import ArchConfig, Model, build_model

MAGIC = b"HRFSEGCK"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed files or arch/parameter mismatches."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += _pack_str(model.config.arch)
    blob += _pack_str(model.config.out_mode)
    blob += struct.pack("<Q", model.seed)
    blob += struct.pack("<I", len(model.params))
    for name, tensor in model.params.items():
        blob += _pack_str(name)
        dims = tensor.shape
        blob += struct.pack("<B", len(dims))
        blob += struct.pack(f"<{len(dims)}I", *dims)
        blob += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def unpack_tuple(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        n = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint file (float32 parameters)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = r.string()
    out_mode = r.string()
    seed = r.unpack("<Q")
    n_params = r.unpack("<I")

    try:
        config = ArchConfig.preset(arch, out_mode)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    model = build_model(config, seed=seed, dtype=np.float32)
    if n_params != len(model.params):
        raise CheckpointError(
            f"checkpoint stores {n_params} parameters but {arch} has {len(model.params)}"
        )
    for _ in range(n_params):
        name = r.string()
        rank = r.unpack("<B")
        dims = r.unpack_tuple(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        if name not in model.params:
            raise CheckpointError(f"unknown parameter {name!r} for arch {arch}")
        target = model.params[name]
        if target.shape != dims:
            raise CheckpointError(
                f"parameter {name!r} has shape {dims} in file but {target.shape} in model"
            )
        target.data = np.ascontiguousarray(data, dtype=np.float32)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last parameter record")
    return model
