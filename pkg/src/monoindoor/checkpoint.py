"""``MIDX1`` checkpoint container.

Layout (little-endian)::

    b"MIDX1\\n"
    u32 manifest length, manifest bytes (UTF-8 ``key=value`` lines)
    u32 tensor count
    per tensor: u16 name length, name, u8 ndim, u32 dims..., float32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes

MAGIC = b"MIDX1\n"


class CheckpointVersionError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


def encode(tensors: dict, manifest: dict) -> bytes:
    text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes, path="<bytes>"):
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {data[:6]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    (mlen,) = struct.unpack("<I", take(4))
    manifest = {}
    for line in take(mlen).decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            manifest[k] = v
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * n), "<f4").reshape(shape).astype(np.float32)
    return tensors, manifest


def save(path, tensors: dict, manifest: dict):
    atomic_write_bytes(path, encode(tensors, manifest))


def load(path):
    return decode(Path(path).read_bytes(), path)
