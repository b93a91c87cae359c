"""Binary container of named float32 tensors.

Layout (little-endian)::

    8 bytes   magic  b"TMTCKPT\\0"
    u32       version (1)
    u32       tensor count
    per tensor:
      u16     name length, then UTF-8 name
      u8      ndim, then ndim x u32 dims
      float32 values, row-major
"""
from __future__ import annotations

import struct

import numpy as np

__all__ = ["MAGIC", "VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"TMTCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f4", order="C")     # keeps 0-d shapes
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a tmtune checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
