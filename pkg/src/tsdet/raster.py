"""Uncompressed 8-bit RGB raster files.

Layout: 12-byte header (magic ``b"TSR1"``, width and height as little-endian
uint32) followed by height x width x 3 bytes of row-major interleaved RGB.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"TSR1"
HEADER = struct.Struct("<4sII")


def write_raster(path: str | Path, pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValidationError(f"raster pixels must be (h, w, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, w, h))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise ValidationError(f"{path}: truncated raster header")
    magic, w, h = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    expected = HEADER.size + w * h * 3
    if len(data) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=HEADER.size).reshape(h, w, 3).copy()
