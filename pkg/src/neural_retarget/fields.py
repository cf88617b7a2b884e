"""Neural image field, energy fields and cumulative energy fields for images."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import MLP, Adam, NetworkConfig, NumericError, fit, fit_sampled
from .raster import RasterImage, axis_index, pixel_centers

log = logging.getLogger(__name__)


class TrainingError(NumericError):
    """Optimisation diverged; ``term`` names the offending loss."""


@dataclass(frozen=True)
class Schedule:
    epochs: int
    iterations: int = 100
    lr: float = 0.001

    @property
    def total(self) -> int:
        return self.epochs * self.iterations


IMAGE_FIELD_CONFIG = NetworkConfig(input_dim=2, hidden_channels=192, hidden_layers=2,
                                   encoding_bands=8, output_dim=3, output_activation="sigmoid")
SCALAR_FIELD_CONFIG = NetworkConfig(input_dim=2, hidden_channels=64, hidden_layers=4,
                                    encoding_bands=8, output_dim=1, output_activation="identity")

IMAGE_SCHEDULE = Schedule(epochs=250, iterations=100)
CUMULATIVE_SCHEDULE = Schedule(epochs=100, iterations=100)
ENERGY_SCHEDULE = Schedule(epochs=100, iterations=100)


def _train(net: MLP, x, y, schedule: Schedule, seed, name: str, on_epoch=None,
           sampler=None) -> list[float]:
    """Full-batch Adam; with ``sampler`` each iteration draws fresh ``(x, y)``."""
    opt = Adam(lr=schedule.lr)
    epoch_losses = []
    for ep in range(schedule.epochs):
        try:
            if sampler is None:
                losses = fit(net, x, y, schedule.iterations, opt=opt, seed=seed, name=name)
            else:
                losses = fit_sampled(net, sampler, schedule.iterations, opt=opt, seed=[seed, ep], name=name)
        except NumericError as exc:
            raise TrainingError(name, f"{name} diverged in epoch {ep}") from exc
        epoch_losses.append(float(np.mean(losses)))
        if on_epoch:
            on_epoch(ep, epoch_losses[-1])
    return epoch_losses


class ScalarField:
    """A scalar function of points that can pull gradients back to its inputs.

    ``value_and_pullback(p)`` returns ``(values, pullback)`` where
    ``pullback(g)`` is ``g[:, None] * dvalues/dp`` with shape ``(n, d)``.
    """

    def __call__(self, p) -> np.ndarray:
        return self.value_and_pullback(p)[0]

    def value_and_pullback(self, p):
        raise NotImplementedError


class NetScalarField(ScalarField):
    def __init__(self, net: MLP, nonnegative: bool = False):
        if net.config.output_dim != 1:
            raise ValueError("scalar fields need output_dim 1")
        self.net = net
        self.nonnegative = nonnegative

    def __call__(self, p):
        y = self.net.forward(np.asarray(p).reshape(-1, self.net.config.input_dim))[:, 0]
        return np.maximum(y, 0) if self.nonnegative else y

    def value_and_pullback(self, p):
        y, cache = self.net.forward_cached(p)
        y = y[:, 0]
        active = y > 0 if self.nonnegative else None

        def pullback(g):
            g = np.asarray(g, dtype=self.net.dtype)
            if active is not None:
                g = np.where(active, g, 0)
            return self.net.backward(cache, g[:, None], param_grads=False)[1]

        return (np.maximum(y, 0) if self.nonnegative else y), pullback


class AnalyticField(ScalarField):
    """Closed-form scalar field; ``grad`` returns ``(n, d)`` partials."""

    def __init__(self, fn: Callable, grad: Callable):
        self.fn = fn
        self.grad = grad

    def __call__(self, p):
        return np.asarray(self.fn(np.asarray(p, np.float64)), dtype=np.float64)

    def value_and_pullback(self, p):
        p = np.asarray(p, np.float64)
        return self(p), lambda g: np.asarray(g)[:, None] * self.grad(p)


# -- image field -------------------------------------------------------------

class ImageField:
    """Continuous RGB image: normalised point -> colour in (0, 1)^3."""

    def __init__(self, net: MLP, width: int | None = None, height: int | None = None):
        self.net = net
        self.width = width
        self.height = height

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p)
        flat = p.reshape(-1, 2)
        return self.net.forward(flat).reshape(p.shape[:-1] + (3,))

    def jacobian(self, p) -> np.ndarray:
        """d colour / d point, shape ``(n, 3, 2)``."""
        p = np.asarray(p).reshape(-1, 2)
        y, cache = self.net.forward_cached(p)
        jac = np.empty((len(p), 3, 2), dtype=np.float64)
        for c in range(3):
            dy = np.zeros_like(y)
            dy[:, c] = 1.0
            jac[:, c, :] = self.net.backward(cache, dy, param_grads=False)[1]
        return jac

    def render(self, width: int | None = None, height: int | None = None) -> RasterImage:
        w, h = width or self.width, height or self.height
        return RasterImage.from_float(self(pixel_centers(w, h)))


def sample_image(field: ImageField, p) -> np.ndarray:
    return field(p)


def image_points(image: RasterImage) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates ``(H*W, 2)`` and colours ``(H*W, 3)``."""
    pts = pixel_centers(image.width, image.height).reshape(-1, 2)
    return pts, image.normalized().reshape(-1, 3)


def bilinear_at(values, p) -> np.ndarray:
    """Bilinear interpolation of a ``(H, W, C)`` grid between pixel centres.

    Points use normalised coordinates; beyond the outer centres the edge
    value is held.
    """
    v = np.asarray(values, np.float64)
    h, w = v.shape[:2]
    p = np.asarray(p, np.float64)
    x = np.clip(p[:, 0] * w - 0.5, 0, w - 1)
    y = np.clip(p[:, 1] * h - 0.5, 0, h - 1)
    x0 = np.minimum(x.astype(int), w - 2) if w > 1 else np.zeros(len(p), int)
    y0 = np.minimum(y.astype(int), h - 2) if h > 1 else np.zeros(len(p), int)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = v[y0, x0] * (1 - fx) + v[y0, x1] * fx
    bottom = v[y1, x0] * (1 - fx) + v[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def train_image_field(image: RasterImage, schedule: Schedule = IMAGE_SCHEDULE, seed: int = 0,
                      config: NetworkConfig = IMAGE_FIELD_CONFIG, on_epoch=None) -> ImageField:
    """Fit an image field to all pixels at once (one full batch per iteration).

    Each iteration takes one jittered point per pixel cell with the bilinear
    colour there as target. The fit passes through the pixel colours at the
    centres and stays smooth between them, where deformed lookups land.
    """
    net = MLP.init(config, seed)
    rgb = image.normalized()

    def sampler(rng):
        pts, _, _ = _jittered(rgb.shape[:2], rng)
        return pts, bilinear_at(rgb, pts)

    _train(net, None, None, schedule, seed, "image-field", on_epoch, sampler=sampler)
    return ImageField(net, image.width, image.height)


def energy_at(field: ImageField, p) -> np.ndarray:
    """L2 norm over all six spatial partials of the field's colour."""
    jac = field.jacobian(p)
    return np.sqrt(np.sum(jac**2, axis=(1, 2)))


# -- discrete energies ---------------------------------------------------------

def pixel_energy(image) -> np.ndarray:
    """Per-pixel L2 norm of the forward differences along x and y over RGB.

    The last column/row uses a clamped neighbour, i.e. a zero difference.
    """
    f = image.normalized() if isinstance(image, RasterImage) else np.asarray(image, np.float64)
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    dx[:, :-1] = f[:, 1:] - f[:, :-1]
    dy[:-1] = f[1:] - f[:-1]
    return np.sqrt(np.sum(dx**2 + dy**2, axis=2))


def cumulative_from_energy(energy, axis: str) -> np.ndarray:
    """Running integral of a per-pixel energy grid along ``axis``.

    Pixels are treated as cells of width ``1/N`` in normalised units with
    constant density, and the value at each pixel centre integrates up to that
    centre: ``(sum_{j<i} e_j + e_i / 2) / N``. Differences between two centres
    are therefore exact integrals of the piecewise-constant density.
    """
    e = np.asarray(energy, dtype=np.float64)
    ax = 1 - axis_index(axis)  # array axis: x -> columns (1), y -> rows (0)
    n = e.shape[ax]
    return (np.cumsum(e, axis=ax) - 0.5 * e) / n


def cumulative_targets(image: RasterImage, axis: str) -> np.ndarray:
    return cumulative_from_energy(pixel_energy(image), axis)


# -- trained scalar fields -----------------------------------------------------

class EnergyField(NetScalarField):
    """Trained pointwise energy network; outputs clamped at 0."""

    def __init__(self, net: MLP):
        super().__init__(net, nonnegative=True)


class ClosedFormEnergy(ScalarField):
    """Energy evaluated directly as the gradient norm of an image field.

    No input gradient is available (it would need second derivatives of the
    image network); use :class:`EnergyField` inside optimisation losses.
    """

    def __init__(self, field: ImageField):
        self.field = field

    def __call__(self, p):
        return energy_at(self.field, p)

    def value_and_pullback(self, p):
        raise NotImplementedError("closed-form energy has no input gradient")


class CumulativeEnergyField(NetScalarField):
    def __init__(self, net: MLP, axis: str):
        super().__init__(net)
        axis_index(axis)
        self.axis = axis

    def segment_energy(self, p, q) -> np.ndarray:
        return np.abs(self(q) - self(p))


def _grid_points(shape) -> np.ndarray:
    h, w = shape
    return pixel_centers(w, h).reshape(-1, 2)


def _jittered(shape, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One uniform point inside every pixel cell plus the cell's row/column."""
    h, w = shape
    rows, cols = np.divmod(np.arange(h * w), w)
    u = rng.random((h * w, 2))
    pts = np.stack([(cols + u[:, 0]) / w, (rows + u[:, 1]) / h], axis=1)
    return pts, rows, cols


def cumulative_at(targets, axis: str, p) -> np.ndarray:
    """Continuous cumulative energy at arbitrary points of a target grid.

    Each pixel cell has constant density, so along the axis the running
    integral is piecewise linear with knots at the cell edges. Edge values
    follow from the centre values (each centre is the mean of its two edges),
    starting from 0 at the leading edge. Across the axis the containing
    scanline is used.
    """
    t = np.asarray(targets, np.float64)
    vi = axis_index(axis)
    lines = t if vi == 0 else t.T  # one scanline per row of ``lines``, running along v
    m, n = lines.shape
    edges = np.zeros((m, n + 1))
    for k in range(n):
        edges[:, k + 1] = 2.0 * lines[:, k] - edges[:, k]
    p = np.asarray(p, np.float64)
    line = np.clip((p[:, 1 - vi] * m).astype(int), 0, m - 1)
    pos = np.clip(p[:, vi] * n, 0.0, float(n))
    j = np.minimum(pos.astype(int), n - 1)
    w = pos - j
    return edges[line, j] + w * (edges[line, j + 1] - edges[line, j])


def train_energy_field(energy, schedule: Schedule = ENERGY_SCHEDULE, seed: int = 0,
                       config: NetworkConfig = SCALAR_FIELD_CONFIG, on_epoch=None) -> EnergyField:
    """Regress a per-pixel energy grid ``(H, W)`` as a piecewise-constant field.

    Every iteration uses one freshly jittered point per pixel cell, so the
    network is pinned down between pixel centres as well as at them.
    """
    energy = np.asarray(energy, dtype=np.float64)
    if not np.all(np.isfinite(energy)):
        raise TrainingError("energy-field", "energy targets are not finite")
    net = MLP.init(config, seed)

    def sampler(rng):
        pts, rows, cols = _jittered(energy.shape, rng)
        return pts, energy[rows, cols][:, None]

    _train(net, None, None, schedule, seed, "energy-field", on_epoch, sampler=sampler)
    return EnergyField(net)


def train_cumulative_energy(targets, axis: str, schedule: Schedule = CUMULATIVE_SCHEDULE,
                            seed: int = 0, config: NetworkConfig = SCALAR_FIELD_CONFIG,
                            on_epoch=None) -> CumulativeEnergyField:
    """Fit the cumulative-energy network to a grid from :func:`cumulative_targets`.

    Targets between pixel centres come from :func:`cumulative_at`, sampled at
    one jittered point per pixel cell per iteration.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise TrainingError("cumulative-energy", "cumulative targets are not finite")
    net = MLP.init(config, seed)

    def sampler(rng):
        pts, _, _ = _jittered(targets.shape, rng)
        return pts, cumulative_at(targets, axis, pts)[:, None]

    _train(net, None, None, schedule, seed, "cumulative-energy", on_epoch, sampler=sampler)
    return CumulativeEnergyField(net, axis)
