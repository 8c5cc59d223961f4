"""Image, mask and depth file formats.

* RGB: 8-bit PNG, floats in [0, 1] are rounded to the nearest level.
* Masks: 1-bit PNG.
* Depth: ``DPTH`` magic, u32 H, u32 W, then H*W little-endian f32, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError

DEPTH_MAGIC = b"DPTH"


def to_uint8(rgb) -> np.ndarray:
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, rgb) -> None:
    Image.fromarray(to_uint8(rgb), mode="RGB").save(path, format="PNG")


def read_png(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an image as float RGB in [0, 1], optionally resized to ``(width, height)``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def write_mask(path, mask) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path, format="PNG")


def read_mask(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read a mask as a bool array, optionally resized (nearest) to ``(width, height)``."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.NEAREST)
        return np.asarray(im) > 127


def write_depth(path, depth) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise InputError(f"depth must be 2-D, got {depth.shape}")
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<2I", *depth.shape))
        fh.write(depth.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC or len(raw) < 12:
        raise InputError(f"{path}: not a DPTH file")
    h, w = struct.unpack_from("<2I", raw, 4)
    if len(raw) != 12 + 4 * h * w:
        raise InputError(f"{path}: size does not match {h}x{w}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)
