"""Soft-mask compositing of a face layer over a background frame.

The binary face mask is eroded with a square structuring element, feathered
with a normalized separable Gaussian and used as per-pixel alpha.
Images are (H, W, 3) uint8 arrays; masks are (H, W) float64 arrays in [0, 1].
"""

from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

REFERENCE_WIDTH = 512
DEFAULT_RADIUS = 4
DEFAULT_SIGMA = 3.0


class ImageFormatError(ValueError):
    pass


def default_radius(width: int) -> int:
    return int(round(DEFAULT_RADIUS * width / REFERENCE_WIDTH))


def default_sigma(width: int) -> float:
    return DEFAULT_SIGMA * width / REFERENCE_WIDTH


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a (2r+1)^2 square; pixels outside the image count as 0."""
    mask = np.asarray(mask, dtype=np.float64)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return mask.copy()
    k = 2 * radius + 1
    # the square element is separable: min over rows, then over columns
    out = np.pad(mask, ((radius, radius), (0, 0)), constant_values=0.0)
    out = sliding_window_view(out, k, axis=0).min(axis=-1)
    out = np.pad(out, ((0, 0), (radius, radius)), constant_values=0.0)
    return sliding_window_view(out, k, axis=1).min(axis=-1)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = kernel.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="edge")
    windows = sliding_window_view(padded, kernel.size, axis=axis)
    return windows @ kernel


def feather_mask(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur (radius ceil(3 sigma), clamp-to-edge)."""
    mask = np.asarray(mask, dtype=np.float64)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return mask.copy()
    k = gaussian_kernel(sigma)
    out = _blur_axis(_blur_axis(mask, k, 0), k, 1)
    return np.clip(out, 0.0, 1.0)


def soft_mask(mask: np.ndarray, radius: int | None = None, sigma: float | None = None) -> np.ndarray:
    width = np.shape(mask)[1]
    radius = default_radius(width) if radius is None else radius
    sigma = default_sigma(width) if sigma is None else sigma
    return feather_mask(erode_mask(mask, radius), sigma)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def composite(fg: np.ndarray, bg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """round(m * fg + (1 - m) * bg) per pixel and channel."""
    fg = np.asarray(fg)
    bg = np.asarray(bg)
    mask = np.asarray(mask, dtype=np.float64)
    if fg.shape != bg.shape or fg.ndim != 3 or fg.shape[2] != 3:
        raise ValueError(f"foreground {fg.shape} and background {bg.shape} must be equal (H, W, 3) images")
    if mask.shape != fg.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {fg.shape[:2]}")
    if mask.size and (mask.min() < 0 or mask.max() > 1):
        raise ValueError("mask samples must lie in [0, 1]")
    m = mask[..., None]
    out = m * fg.astype(np.float64) + (1.0 - m) * bg.astype(np.float64)
    return np.clip(round_half_away(out), 0, 255).astype(np.uint8)


# -- PPM / PGM --------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(blob: bytes, path) -> tuple[bytes, int, int, int, int]:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: malformed header")
    magic = fields[0]
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header field") from None
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid maxval {maxval}")
    return magic, width, height, maxval, pos + 1


def _samples(blob: bytes, offset: int, count: int, maxval: int, path) -> np.ndarray:
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = count * dtype.itemsize
    if len(blob) - offset < need:
        raise ImageFormatError(f"{path}: expected {need} bytes of pixel data, got {len(blob) - offset}")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset)


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, w, h, maxval, off = _parse_header(blob, path)
    if magic != b"P6":
        raise ImageFormatError(f"{path}: expected a binary PPM (P6), got {magic!r}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM images are supported (maxval {maxval})")
    return _samples(blob, off, w * h * 3, maxval, path).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected an (H, W, 3) uint8 image, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm_mask(path) -> np.ndarray:
    """Read a P5 mask and map samples to [0, 1] by dividing by maxval."""
    blob = Path(path).read_bytes()
    magic, w, h, maxval, off = _parse_header(blob, path)
    if magic != b"P5":
        raise ImageFormatError(f"{path}: expected a binary PGM (P5), got {magic!r}")
    data = _samples(blob, off, w * h, maxval, path).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_pgm_mask(path, mask: np.ndarray, maxval: int = 255) -> None:
    mask = np.asarray(mask, dtype=np.float64)
    if maxval not in (255, 65535):
        raise ImageFormatError(f"maxval must be 255 or 65535, got {maxval}")
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    data = np.clip(round_half_away(mask * maxval), 0, maxval).astype(dtype)
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + data.tobytes())
