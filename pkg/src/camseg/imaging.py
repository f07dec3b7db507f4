"""Raster helpers: resampling, rounding, PNG/PGM I/O."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def resize_bilinear(src: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample with corner alignment (source corners land on destination corners)."""
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(height, h)
    c0, c1, fc = coords(width, w)
    fr, fc = fr[:, None], fc[None, :]
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bot = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    # keep interpolation inside the source range despite rounding
    return np.clip(out, src.min(), src.max())


def resize_nearest(src: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resample using pixel-centre mapping."""
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    h, w = src.shape[:2]
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(int), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(int), w - 1)
    return src[rows][:, cols]


def save_png(path, array: np.ndarray) -> None:
    """Write an 8-bit grayscale ``(H, W)`` or RGB ``(H, W, 3)`` PNG."""
    array = np.asarray(array)
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    if array.dtype != np.uint8:
        raise ValueError(f"PNG export needs uint8 data, got {array.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def load_gray(path) -> np.ndarray:
    """Read a PNG or PGM as an ``(H, W)`` array; 16-bit files keep their depth."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im)
            return arr.astype(np.uint16) if arr.max(initial=0) <= 65535 else arr
        return np.asarray(im.convert("L"))
