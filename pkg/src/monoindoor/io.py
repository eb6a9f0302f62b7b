"""Binary PPM (P6) and grayscale PFM readers/writers with atomic writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


class DatasetError(Exception):
    pass


class DatasetFormatError(DatasetError):
    def __init__(self, path, offset: int, message: str):
        self.path = Path(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


class MissingIntrinsics(DatasetError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _header_tokens(data: bytes, path, count: int):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, payload offset)."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise DatasetFormatError(path, pos, "truncated header")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append((data[start:pos], start))
    if pos >= n:
        raise DatasetFormatError(path, pos, "missing payload")
    # exactly one whitespace byte separates header and payload
    return tokens, pos + 1


def _int_token(tok, path):
    value, offset = tok
    try:
        out = int(value)
    except ValueError:
        raise DatasetFormatError(path, offset, f"expected integer, got {value!r}") from None
    if out <= 0:
        raise DatasetFormatError(path, offset, f"expected positive integer, got {out}")
    return out


def encode_ppm(image: np.ndarray) -> bytes:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM payload must be uint8 (H, W, 3)")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes()


def decode_ppm(data: bytes, path="<bytes>") -> np.ndarray:
    if data[:2] != b"P6":
        raise DatasetFormatError(path, 0, f"bad magic {data[:2]!r}, expected b'P6'")
    (_, w, h, maxval), offset = _header_tokens(data, path, 4)
    w, h = _int_token(w, path), _int_token(h, path)
    if _int_token(maxval, path) != 255:
        raise DatasetFormatError(path, maxval[1], "only maxval 255 is supported")
    need = w * h * 3
    if len(data) - offset < need:
        raise DatasetFormatError(path, len(data), f"payload truncated: need {need} bytes after offset {offset}")
    return np.frombuffer(data, np.uint8, need, offset).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray):
    atomic_write_bytes(path, encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), path)


def encode_pfm(depth: np.ndarray, little_endian: bool = True) -> bytes:
    if depth.ndim != 2:
        raise ValueError("PFM writer expects a single-channel (H, W) raster")
    h, w = depth.shape
    scale = -1.0 if little_endian else 1.0
    dtype = "<f4" if little_endian else ">f4"
    # PFM stores rows bottom-to-top
    payload = np.ascontiguousarray(depth[::-1], dtype=dtype).tobytes()
    return f"Pf\n{w} {h}\n{scale}\n".encode() + payload


def decode_pfm(data: bytes, path="<bytes>") -> np.ndarray:
    magic = data[:2]
    if magic not in (b"Pf", b"PF"):
        raise DatasetFormatError(path, 0, f"bad magic {magic!r}, expected b'Pf'")
    channels = 1 if magic == b"Pf" else 3
    (_, w, h, scale), offset = _header_tokens(data, path, 4)
    w, h = _int_token(w, path), _int_token(h, path)
    try:
        s = float(scale[0])
    except ValueError:
        raise DatasetFormatError(path, scale[1], f"bad scale {scale[0]!r}") from None
    if s == 0:
        raise DatasetFormatError(path, scale[1], "scale must be nonzero")
    dtype = "<f4" if s < 0 else ">f4"
    need = w * h * channels * 4
    if len(data) - offset < need:
        raise DatasetFormatError(path, len(data), f"payload truncated: need {need} bytes after offset {offset}")
    arr = np.frombuffer(data, dtype, w * h * channels, offset).astype(np.float32)
    arr = arr.reshape(h, w, channels)[::-1]
    if channels == 1:
        arr = arr[..., 0]
    return np.ascontiguousarray(arr)


def write_pfm(path, depth: np.ndarray, little_endian: bool = True):
    atomic_write_bytes(path, encode_pfm(depth, little_endian))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes(), path)
