"""8-bit RGB rasters, pixel-centre coordinates and PNG/PPM I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageError(ValueError):
    pass


AXES = {"x": 0, "y": 1}


def axis_index(axis: str) -> int:
    try:
        return AXES[axis]
    except KeyError:
        raise ImageError(f"axis must be 'x' or 'y', got {axis!r}") from None


@dataclass
class RasterImage:
    """Image stored as ``(height, width, 3)`` uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = np.repeat(px[..., None], 3, axis=2)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageError(f"expected (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < 2 or px.shape[1] < 2:
            raise ImageError(f"image must be at least 2x2, got {px.shape[1]}x{px.shape[0]}")
        if px.dtype != np.uint8:
            raise ImageError(f"expected uint8 samples, got {px.dtype}")
        self.pixels = np.ascontiguousarray(px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def normalized(self) -> np.ndarray:
        """RGB in [0, 1] as float64, shape ``(H, W, 3)``."""
        return self.pixels.astype(np.float64) / 255.0

    @classmethod
    def from_float(cls, rgb) -> "RasterImage":
        """Quantise [0, 1] floats to 8 bits, rounding half up."""
        rgb = np.asarray(rgb, dtype=np.float64)
        q = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5)
        return cls(q.astype(np.uint8))

    def __eq__(self, other):
        return isinstance(other, RasterImage) and np.array_equal(self.pixels, other.pixels)

    @classmethod
    def read(cls, path) -> "RasterImage":
        path = Path(path)
        if path.suffix.lower() in (".ppm", ".pnm"):
            return cls(read_ppm(path))
        from PIL import Image

        with Image.open(path) as im:
            return cls(np.asarray(im.convert("RGB"), dtype=np.uint8))

    def write(self, path) -> None:
        path = Path(path)
        if path.suffix.lower() in (".ppm", ".pnm"):
            write_ppm(path, self.pixels)
            return
        from PIL import Image

        Image.fromarray(self.pixels, "RGB").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    """Binary mask from a PNG/PPM: luminance >= 128 is inside."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        px = read_ppm(path).astype(np.float64)
        lum = px @ np.array([0.299, 0.587, 0.114])
    else:
        from PIL import Image

        with Image.open(path) as im:
            lum = np.asarray(im.convert("L"), dtype=np.float64)
    return lum >= 128


def write_mask(path, mask) -> None:
    px = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    RasterImage(px).write(path)


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ImageError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageError(f"{path}: maxval {maxval} unsupported")
    pos += 1
    arr = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    return arr.reshape(h, w, 3).copy()


def write_ppm(path, pixels) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def pixel_centers(width: int, height: int, norm_width: int | None = None,
                  norm_height: int | None = None) -> np.ndarray:
    """Normalised pixel-centre coordinates ``(x, y)``, shape ``(height, width, 2)``.

    Pixel ``(i, j)`` maps to ``((j + 0.5) / norm_width, (i + 0.5) / norm_height)``;
    the normalisers default to the grid size. Retargeted outputs pass the
    input size so their coordinates live in input-normalised units.
    """
    nw = norm_width or width
    nh = norm_height or height
    xs = (np.arange(width) + 0.5) / nw
    ys = (np.arange(height) + 0.5) / nh
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def psnr(a, b) -> float:
    """PSNR in dB between two images or float arrays in [0, 1]."""
    fa = a.normalized() if isinstance(a, RasterImage) else np.asarray(a, np.float64)
    fb = b.normalized() if isinstance(b, RasterImage) else np.asarray(b, np.float64)
    mse = float(np.mean((fa - fb) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def mean_abs_error(a: RasterImage, b: RasterImage) -> float:
    """Mean absolute difference in [0, 1] units."""
    if a.pixels.shape != b.pixels.shape:
        raise ImageError(f"shape mismatch {a.pixels.shape} vs {b.pixels.shape}")
    return float(np.mean(np.abs(a.normalized() - b.normalized())))
