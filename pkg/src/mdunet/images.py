"""Grayscale image I/O.

Binary PGM (P5, maxval <= 255) is supported without any dependency and is
the format all masks are written in; 8-bit grayscale PNG works when Pillow
is installed.
"""

from __future__ import annotations

import os

import numpy as np


class ImageIOError(ValueError):
    """Raised for malformed or unsupported image files."""


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # whitespace and '#'-to-end-of-line comments may separate header tokens
    while pos < len(data):
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageIOError("truncated header")
    return data[start:pos], pos


def decode_pgm(data: bytes) -> np.ndarray:
    """Binary PGM bytes -> uint8 array (H, W)."""
    if data[:2] != b"P5":
        raise ImageIOError(
            "unsupported format: expected binary PGM magic 'P5'"
            + (" (ASCII 'P2' not supported)" if data[:2] == b"P2" else "")
        )
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageIOError(f"bad header token {tok!r}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageIOError(f"bad dimensions {width}x{height}")
    if not (0 < maxval <= 255):
        raise ImageIOError(f"unsupported maxval {maxval} (must be <= 255)")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ImageIOError(
            f"truncated payload: expected {width * height} bytes, got {len(raster)}"
        )
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ImageIOError(f"expected a 2-D image, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        if pixels.min() < 0 or pixels.max() > 255:
            raise ImageIOError("pixel values outside [0, 255]")
        pixels = pixels.astype(np.uint8)
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def load_image(path: str) -> np.ndarray:
    """Load a grayscale image as float32 (H, W) scaled to [0, 1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        pixels = _load_png(path)
    else:
        with open(path, "rb") as f:
            pixels = decode_pgm(f.read())
    return pixels.astype(np.float32) / 255.0


def load_mask(path: str) -> np.ndarray:
    """Load a mask image; any nonzero pixel is foreground (label 1)."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        pixels = _load_png(path)
    else:
        with open(path, "rb") as f:
            pixels = decode_pgm(f.read())
    return (pixels > 0).astype(np.int64)


def save_mask(path: str, mask: np.ndarray):
    """Write a binary mask as P5 with values {0, 255}."""
    data = encode_pgm(np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8))
    with open(path, "wb") as f:
        f.write(data)


def save_image(path: str, pixels01: np.ndarray):
    """Write a [0, 1] float image as P5."""
    arr = np.clip(np.asarray(pixels01), 0.0, 1.0)
    data = encode_pgm(np.round(arr * 255.0).astype(np.uint8))
    with open(path, "wb") as f:
        f.write(data)


def _load_png(path: str) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:
        raise ImageIOError(
            "PNG support requires the optional Pillow dependency"
        ) from None
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)
