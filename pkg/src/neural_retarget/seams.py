"""Discrete seam carving by dynamic programming (shrink and expand)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import RasterImage

ORIENTATIONS = ("vertical", "horizontal")


@dataclass
class SeamGrid:
    """Per-pixel nonnegative energy, shape ``(height, width)``."""

    energy: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energy, dtype=np.float64)
        if e.ndim != 2 or min(e.shape) < 1:
            raise ValueError(f"seam grid must be 2D and nonempty, got {e.shape}")
        if not np.all(np.isfinite(e)) or np.any(e < 0):
            raise ValueError("seam grid energies must be finite and >= 0")
        self.energy = e

    @property
    def height(self) -> int:
        return self.energy.shape[0]

    @property
    def width(self) -> int:
        return self.energy.shape[1]


@dataclass
class Seam:
    """One index per row (vertical seam) or per column (horizontal seam)."""

    indices: np.ndarray
    orientation: str = "vertical"

    def __post_init__(self):
        _check_orientation(self.orientation)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(self.indices) > 1 and np.max(np.abs(np.diff(self.indices))) > 1:
            raise ValueError("seam is not connected")


def _check_orientation(orientation):
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")


def energy_map(image) -> SeamGrid:
    """Sum over channels of ``|d/dx| + |d/dy|``, central differences with clamped edges.

    A step between columns ``k`` and ``k + 1`` therefore lights up exactly
    those two columns.
    """
    f = image.normalized() if isinstance(image, RasterImage) else np.asarray(image, np.float64)
    if f.ndim == 2:
        f = f[..., None]
    if f.shape[0] < 2 or f.shape[1] < 2:
        raise ValueError("image must be at least 2x2")
    g = np.pad(f, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = (g[1:-1, 2:] - g[1:-1, :-2]) / 2
    dy = (g[2:, 1:-1] - g[:-2, 1:-1]) / 2
    return SeamGrid(np.sum(np.abs(dx) + np.abs(dy), axis=2))


def _grid(g) -> np.ndarray:
    return g.energy if isinstance(g, SeamGrid) else SeamGrid(g).energy


def min_seam(grid, orientation: str = "vertical") -> tuple[Seam, float]:
    """Globally cheapest connected seam; ties go to the smallest index."""
    _check_orientation(orientation)
    e = _grid(grid)
    if orientation == "horizontal":
        e = e.T
    h, w = e.shape
    cost = np.empty_like(e)
    back = np.zeros((h, w), dtype=np.int64)
    cost[0] = e[0]
    idx = np.arange(w)
    for i in range(1, h):
        prev = cost[i - 1]
        cand = np.full((3, w), np.inf)
        cand[0, 1:] = prev[:-1]   # from j - 1
        cand[1] = prev            # from j
        cand[2, :-1] = prev[1:]   # from j + 1
        k = np.argmin(cand, axis=0)  # first minimum = smallest parent index
        back[i] = idx + k - 1
        cost[i] = e[i] + cand[k, idx]
    path = np.empty(h, dtype=np.int64)
    path[-1] = int(np.argmin(cost[-1]))
    for i in range(h - 1, 0, -1):
        path[i - 1] = back[i, path[i]]
    return Seam(path, orientation), float(cost[-1, path[-1]])


def seam_cost(grid, seam: Seam) -> float:
    e = _grid(grid)
    if seam.orientation == "horizontal":
        e = e.T
    total = 0.0
    for i, j in enumerate(seam.indices):
        total += e[i, j]
    return total


def remove_seam(pixels: np.ndarray, seam: Seam) -> np.ndarray:
    """Drop one pixel per scanline; works on ``(H, W)`` or ``(H, W, C)`` arrays."""
    a = np.asarray(pixels)
    if seam.orientation == "horizontal":
        a = np.swapaxes(a, 0, 1)
    h, w = a.shape[:2]
    keep = np.ones((h, w), bool)
    keep[np.arange(h), seam.indices] = False
    out = a[keep].reshape((h, w - 1) + a.shape[2:])
    return np.swapaxes(out, 0, 1) if seam.orientation == "horizontal" else out


def _extent(image: RasterImage, orientation: str) -> int:
    return image.width if orientation == "vertical" else image.height


def carve(image: RasterImage, n: int, orientation: str = "vertical") -> RasterImage:
    """Remove ``n`` seams one at a time, recomputing the energy after each."""
    _check_orientation(orientation)
    if n < 0 or n >= _extent(image, orientation):
        raise ValueError(f"cannot remove {n} seams from extent {_extent(image, orientation)}")
    px = image.pixels
    for _ in range(n):
        seam, _ = min_seam(energy_map(px.astype(np.float64) / 255.0), orientation)
        px = remove_seam(px, seam)
    return RasterImage(px)


def select_seams(image: RasterImage, n: int, orientation: str = "vertical") -> np.ndarray:
    """``n`` disjoint low-cost seams in original coordinates, shape ``(n, length)``.

    Seams are found one after another on a copy from which each found seam is
    removed, while a map of original indices is carved alongside it.
    """
    _check_orientation(orientation)
    px = image.pixels.astype(np.float64) / 255.0
    if orientation == "horizontal":
        px = np.swapaxes(px, 0, 1)
    h, w = px.shape[:2]
    origin = np.tile(np.arange(w), (h, 1))
    found = []
    for _ in range(n):
        seam, _ = min_seam(energy_map(px), "vertical")
        found.append(origin[np.arange(h), seam.indices])
        px = remove_seam(px, seam)
        origin = remove_seam(origin, seam)
    return np.array(found, dtype=np.int64).reshape(n, h)


def expand_seams(image: RasterImage, n: int, orientation: str = "vertical") -> RasterImage:
    """Duplicate ``n`` disjoint seams once each.

    Each inserted pixel is the average of the seam pixel and its following
    neighbour (the pixel itself at the far edge).
    """
    _check_orientation(orientation)
    if n < 0 or n >= _extent(image, orientation):
        raise ValueError(f"cannot insert {n} seams into extent {_extent(image, orientation)}")
    if n == 0:
        return RasterImage(image.pixels.copy())
    seams = select_seams(image, n, orientation)
    px = image.pixels.astype(np.float64)
    if orientation == "horizontal":
        px = np.swapaxes(px, 0, 1)
    h, w = px.shape[:2]
    out = np.empty((h, w + n, 3))
    for i in range(h):
        dup = np.zeros(w, bool)
        dup[seams[:, i]] = True
        row = px[i]
        nxt = np.concatenate([row[1:], row[-1:]])
        inserted = (row + nxt) / 2
        pieces = np.empty((w, 2, 3))
        pieces[:, 0] = row
        pieces[:, 1] = inserted
        take = np.stack([np.ones(w, bool), dup], axis=1)
        out[i] = pieces[take]
    out = np.floor(out + 0.5).astype(np.uint8)
    return RasterImage(np.swapaxes(out, 0, 1) if orientation == "horizontal" else out)


def seam_step_field(removed: np.ndarray, width: int, height: int, orientation: str = "vertical"):
    """Piecewise-constant deformation reproducing the removal of ``removed`` seams.

    ``removed`` holds original indices, shape ``(n, length)`` as returned by
    :func:`select_seams`. Output pixel ``j`` of a scanline reads the ``j``-th
    kept input pixel, so ``D`` is the jump ``(k - j) / extent`` over that pixel's
    cell. Points use input-normalised coordinates.
    """
    _check_orientation(orientation)
    removed = np.atleast_2d(np.asarray(removed, dtype=np.int64))
    extent, length = (width, height) if orientation == "vertical" else (height, width)
    n = removed.shape[0]
    keep = np.ones((length, extent), bool)
    for s in removed:
        keep[np.arange(length), s] = False
    kept = np.stack([np.flatnonzero(r) for r in keep]) if n < extent else np.zeros((length, 0), np.int64)
    shift = (kept - np.arange(extent - n)) / extent
    vi = 0 if orientation == "vertical" else 1

    def D(p):
        p = np.asarray(p, np.float64).reshape(-1, 2)
        j = np.clip(np.floor(p[:, vi] * extent).astype(int), 0, extent - n - 1)
        line = np.clip(np.floor(p[:, 1 - vi] * length).astype(int), 0, length - 1)
        return shift[line, j]

    return D
