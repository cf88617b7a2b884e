"""Quality metrics shared by the CLI reports and the tests."""

from __future__ import annotations

import numpy as np

from .raster import RasterImage
from .seams import energy_map


def energy_mass(image: RasterImage) -> float:
    """Total gradient energy (sum over pixels of ``|d/dx| + |d/dy|`` over channels)."""
    return float(energy_map(image).energy.sum())


def energy_retention(source: RasterImage, output: RasterImage) -> float:
    """Output energy mass over input energy mass; a zero-energy pair counts as fully retained."""
    a, b = energy_mass(source), energy_mass(output)
    if a == 0:
        return 1.0 if b == 0 else float("inf")
    return b / a


def side_by_side(images, gap: int = 4, fill: int = 255) -> RasterImage:
    """Images placed left to right, top-aligned, separated by ``gap`` pixels of ``fill``."""
    h = max(im.height for im in images)
    w = sum(im.width for im in images) + gap * (len(images) - 1)
    canvas = np.full((h, w, 3), fill, np.uint8)
    x = 0
    for im in images:
        canvas[: im.height, x:x + im.width] = im.pixels
        x += im.width + gap
    return RasterImage(canvas)


def seam_overlay(image: RasterImage, seams: np.ndarray, orientation: str = "vertical") -> RasterImage:
    """Input with the given seams (original coordinates, one per row) painted red."""
    px = image.pixels.copy()
    for s in np.asarray(seams).reshape(-1, px.shape[0] if orientation == "vertical" else px.shape[1]):
        if orientation == "vertical":
            px[np.arange(len(s)), s] = (255, 0, 0)
        else:
            px[s, np.arange(len(s))] = (255, 0, 0)
    return RasterImage(px)
