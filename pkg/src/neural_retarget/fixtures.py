"""Deterministic synthetic test images and masks."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .raster import RasterImage

BACKGROUND = 128


def constant(width=32, height=32, value=BACKGROUND) -> RasterImage:
    return RasterImage(np.full((height, width, 3), value, np.uint8))


def stripe(width=64, height=64, stripe_width=16, center=None, period=4.0, amplitude=100) -> RasterImage:
    """Flat gray background with one vertical band of fine horizontal sinusoidal texture."""
    center = width / 2 if center is None else center
    x0 = int(round(center - stripe_width / 2))
    px = np.full((height, width, 3), BACKGROUND, np.float64)
    cols = np.arange(x0, x0 + stripe_width)
    wave = BACKGROUND + amplitude * np.sin(2 * np.pi * (cols - x0 + 0.5) / period)
    px[:, cols, :] = wave[None, :, None]
    px[:, cols, 1] = BACKGROUND + 0.6 * (wave - BACKGROUND)[None, :]
    return RasterImage(np.clip(np.round(px), 0, 255).astype(np.uint8))


def two_stripes(width=64, height=64, stripe_width=8, period=4.0) -> RasterImage:
    a = stripe(width, height, stripe_width, center=width * 0.25, period=period).pixels
    b = stripe(width, height, stripe_width, center=width * 0.75, period=period).pixels
    out = np.where(a != BACKGROUND, a, b)
    return RasterImage(out.astype(np.uint8))


def natural(size=64, seed=0) -> RasterImage:
    """Smooth sky gradient with soft coloured blobs and mild texture."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    img[..., 0] = 0.45 + 0.35 * y
    img[..., 1] = 0.6 + 0.2 * y - 0.1 * x
    img[..., 2] = 0.85 - 0.3 * y
    for _ in range(6):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        rx, ry = rng.uniform(0.06, 0.22, 2)
        col = rng.uniform(0.05, 0.95, 3)
        d = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2
        a = 1.0 / (1.0 + np.exp(np.clip((d - 1) * 12, -60, 60)))
        img = img * (1 - a[..., None]) + a[..., None] * col
    tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.2)
    img += 0.08 * (tex / np.abs(tex).max())[..., None]
    return RasterImage(np.clip(np.round(img * 255), 0, 255).astype(np.uint8))


def corridors(width=24, height=16, centers=(6, 17), corridor_width=3, seed=0) -> RasterImage:
    """Random texture crossed by flat vertical corridors of constant colour."""
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, (height, width, 3)).astype(np.uint8)
    for c in centers:
        lo = c - corridor_width // 2
        px[:, lo:lo + corridor_width] = BACKGROUND
    return RasterImage(px)


def random_texture(width=16, height=16, seed=0) -> RasterImage:
    rng = np.random.default_rng(seed)
    return RasterImage(rng.integers(0, 256, (height, width, 3)).astype(np.uint8))


def square_scene(width=48, height=48, side=10, corner=(8, 8)) -> tuple[RasterImage, np.ndarray]:
    """Flat background with one textured square; returns the image and its mask."""
    px = np.full((height, width, 3), BACKGROUND, np.uint8)
    r, c = corner
    yy, xx = np.mgrid[0:side, 0:side]
    tex = (60 + 150 * ((xx // 2 + yy // 2) % 2)).astype(np.uint8)
    px[r:r + side, c:c + side, 0] = tex
    px[r:r + side, c:c + side, 1] = 255 - tex
    px[r:r + side, c:c + side, 2] = 40
    mask = np.zeros((height, width), bool)
    mask[r:r + side, c:c + side] = True
    return RasterImage(px), mask


def stripe_mask(image: RasterImage) -> np.ndarray:
    """Pixels that differ from the flat background."""
    return np.any(image.pixels != BACKGROUND, axis=2)


def stripe_extent(image: RasterImage, axis: int = 0, threshold: float = 0.25) -> int:
    """Number of columns (axis 0) or rows whose mean gradient energy exceeds
    ``threshold`` times the peak, a width measure robust to resampling blur."""
    f = image.normalized()
    d = np.zeros(f.shape[:2])
    if axis == 0:
        g = np.abs(np.diff(f, axis=1)).sum(axis=2)
        d[:, :-1] += g
        d[:, 1:] += g
        prof = d.mean(axis=0)
    else:
        g = np.abs(np.diff(f, axis=0)).sum(axis=2)
        d[:-1] += g
        d[1:] += g
        prof = d.mean(axis=1)
    return int(np.sum(prof > threshold * prof.max())) if prof.max() > 0 else 0
