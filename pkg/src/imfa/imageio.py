"""Bit-exact image file formats: binary PPM (P6) and raw float32 blobs.

Blob layout: 16-byte header {magic "IMFA", u32 height, u32 width,
u32 channels, little-endian} followed by row-major float32 data.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DatasetIOError, DimensionError

BLOB_MAGIC = b"IMFA"
_HEADER = struct.Struct("<4sIII")


def validate_image(img: np.ndarray, divisor: int = 32) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"image must be H x W x 3, got {img.shape}")
    h, w = img.shape[:2]
    if h % divisor or w % divisor:
        raise DimensionError(f"image size {h}x{w} not divisible by {divisor}")
    return img.astype(np.float32, copy=False)


def write_blob(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.float32)
    if img.ndim != 3:
        raise DimensionError(f"blob image must be 3-D, got shape {img.shape}")
    h, w, c = img.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(BLOB_MAGIC, h, w, c))
        fh.write(img.tobytes())
    os.replace(tmp, path)


def read_blob(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read image blob {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise DatasetIOError(f"truncated image blob {path}")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != BLOB_MAGIC:
        raise DatasetIOError(f"bad magic in image blob {path}")
    expected = _HEADER.size + h * w * c * 4
    if len(raw) != expected:
        raise DatasetIOError(f"truncated image blob {path}: {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(h, w, c).copy()


def write_ppm(path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] as binary P6, maxval 255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"PPM image must be H x W x 3, got {img.shape}")
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())
    os.replace(tmp, path)


def read_ppm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read PPM {path}: {e}") from e
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos] in b" \t\r\n":
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise DatasetIOError(f"malformed PPM header in {path}")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise DatasetIOError(f"{path} is not a binary P6 PPM")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise DatasetIOError(f"malformed PPM header in {path}") from e
    if maxval != 255:
        raise DatasetIOError(f"unsupported PPM maxval {maxval} in {path}")
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DatasetIOError(f"truncated PPM body in {path}")
    u8 = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (u8.astype(np.float32) / 255.0)
