"""Object removal and moving through deformation fields at unchanged size."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .deform import (DeformationField, EpochLog, ImageDomain, LossSpec, LossWeights, RetargetJob,
                     Samples, init_uniform, optimize, render_output)
from .fields import ImageField, Schedule, pixel_energy
from .pipeline import FieldSchedules, ImageFields, train_fields
from .raster import RasterImage, axis_index

log = logging.getLogger(__name__)

MOVE_REGULARIZER = 0.01


class MaskField:
    """Soft mask ``m(p)`` in [0, 1]: bilinear lookup into a Gaussian-blurred binary mask.

    Points outside the image read 0. ``offset`` translates the mask in
    normalised units, so ``MaskField(..., offset=d)(p) == MaskField(...)(p - d)``.
    """

    def __init__(self, blurred: np.ndarray, offset=(0.0, 0.0)):
        self.values = np.asarray(blurred, np.float64)
        self.height, self.width = self.values.shape
        self.offset = np.asarray(offset, np.float64)
        self.area = float(self.values.mean())

    def translated(self, delta) -> "MaskField":
        return MaskField(self.values, self.offset + np.asarray(delta, np.float64))

    def _cells(self, p):
        p = np.asarray(p, np.float64).reshape(-1, 2) - self.offset
        x = p[:, 0] * self.width - 0.5
        y = p[:, 1] * self.height - 0.5
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx, fy = x - x0, y - y0
        pad = np.pad(self.values, 1)  # zero border: outside reads 0

        def at(r, c):
            r = np.clip(r + 1, 0, self.height + 1)
            c = np.clip(c + 1, 0, self.width + 1)
            return pad[r, c]

        return at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1), fx, fy

    def __call__(self, p) -> np.ndarray:
        v00, v01, v10, v11, fx, fy = self._cells(p)
        top = v00 + fx * (v01 - v00)
        bot = v10 + fx * (v11 - v10)
        return top + fy * (bot - top)

    def value_and_pullback(self, p):
        v00, v01, v10, v11, fx, fy = self._cells(p)
        top = v00 + fx * (v01 - v00)
        bot = v10 + fx * (v11 - v10)
        dx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * self.width
        dy = (bot - top) * self.height
        grad = np.stack([dx, dy], axis=1)
        return top + fy * (bot - top), lambda g: np.asarray(g)[:, None] * grad


def build_mask_field(mask, sigma: float = 2.0, shape: tuple[int, int] | None = None) -> MaskField:
    """Blur a binary ``(H, W)`` mask by ``sigma`` pixels; tiny values are cut to exactly 0."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match image {tuple(shape)}")
    if m.dtype != bool:
        m = m >= 128 if m.max() > 1 else m > 0
    b = ndimage.gaussian_filter(m.astype(np.float64), sigma, mode="nearest") if sigma > 0 else m.astype(float)
    b[b < 1e-3] = 0.0
    return MaskField(np.clip(b, 0.0, 1.0))


def _lookup(D, points, vi):
    q = np.array(points, np.float64, copy=True)
    d = np.asarray(D(q), np.float64).reshape(-1)
    q[:, vi] += d
    return q, d


def loss_removal(D, mask: MaskField, points, axis="x") -> float:
    """Mean mask value at the lookup points."""
    vi = axis_index(axis) if isinstance(axis, str) else axis
    q, _ = _lookup(D, points, vi)
    return float(np.mean(mask(q)))


def _move_target(offset, vi):
    delta = np.zeros(2)
    delta[vi] = offset
    return delta


def loss_move(D, mask: MaskField, offset: float, points, axis="x") -> float:
    """Anti-repeat + target-offset + small magnitude regulariser for a move by ``offset`` along ``axis``."""
    vi = axis_index(axis) if isinstance(axis, str) else axis
    points = np.asarray(points, np.float64)
    q, d = _lookup(D, points, vi)
    return _move_terms(d, q, points, mask, offset, vi)[0]


def _move_terms(d, q, points, mask: MaskField, offset, vi, pull_q=False):
    n = len(d)
    target_mask = mask.translated(_move_target(offset, vi))(points)
    inside = target_mask > 0
    outside = ~inside
    if pull_q:
        mq, pull = mask.value_and_pullback(q)
    else:
        mq, pull = mask(q), None
    anti = float(np.mean(mq * outside))
    k = int(inside.sum())
    r = d + offset
    target = float(np.sum(np.abs(r[inside])) / k) if k else 0.0
    reg = MOVE_REGULARIZER * float(np.mean(np.abs(d)))
    value = anti + target + reg
    if not pull_q:
        return value, None
    g = np.asarray(pull(outside / n), np.float64)[:, vi]
    if k:
        g = g + np.where(inside, np.sign(r), 0.0) / k
    g = g + MOVE_REGULARIZER * np.sign(d) / n
    return value, g


def removal_term(mask: MaskField):
    def term(d, samples: Samples):
        vi = samples.vi
        q = np.array(samples.points, np.float64, copy=True)
        q[:, vi] += d["p"]
        m, pull = mask.value_and_pullback(q)
        n = len(q)
        return float(np.mean(m)), {"p": np.asarray(pull(np.full(n, 1.0 / n)), np.float64)[:, vi]}
    return term


def move_term(mask: MaskField, offset: float):
    def term(d, samples: Samples):
        vi = samples.vi
        q = np.array(samples.points, np.float64, copy=True)
        q[:, vi] += d["p"]
        value, g = _move_terms(d["p"], q, samples.points, mask, offset, vi, pull_q=True)
        return value, {"p": g}
    return term


@dataclass
class EditJob:
    image: RasterImage
    mask: np.ndarray
    mode: str = "remove"
    offset: tuple[float, float] = (0.0, 0.0)
    axis: str = "x"
    weights: LossWeights = field(default_factory=LossWeights)
    edit_weight: float = 10000.0
    sigma: float = 2.0
    init_schedule: Schedule = Schedule(epochs=50, iterations=100)
    schedule: Schedule = Schedule(epochs=50, iterations=100)
    field_schedules: FieldSchedules = FieldSchedules()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("remove", "move"):
            raise ValueError(f"edit mode must be remove or move, got {self.mode!r}")
        m = np.asarray(self.mask)
        if m.shape[:2] != (self.image.height, self.image.width):
            raise ValueError(f"mask shape {m.shape[:2]} does not match image "
                             f"{(self.image.height, self.image.width)}")
        if not (math.isfinite(self.edit_weight) and self.edit_weight >= 0):
            raise ValueError("edit_weight must be finite and >= 0")
        axis_index(self.axis)
        if self.mode == "move":
            mb = np.asarray(self.mask, bool) if m.dtype == bool else np.asarray(self.mask) >= 128
            if mb.any():
                rows, cols = np.nonzero(mb)
                dx, dy = self.offset
                lo_x, hi_x = cols.min() / self.image.width + dx, (cols.max() + 1) / self.image.width + dx
                lo_y, hi_y = rows.min() / self.image.height + dy, (rows.max() + 1) / self.image.height + dy
                if lo_x < 0 or hi_x > 1 or lo_y < 0 or hi_y > 1:
                    raise ValueError(f"offset {self.offset} moves the object outside the image")


@dataclass
class EditResult:
    image: RasterImage
    deformations: list[DeformationField]
    logs: list[list[EpochLog]]
    residual: float


class DeformedImageField(ImageField):
    """``base`` read through a deformation: ``p -> base(p + v D(p))``."""

    def __init__(self, base: ImageField, D: DeformationField, width: int, height: int):
        super().__init__(base.net, width, height)
        self.base = base
        self.D = D

    def __call__(self, p):
        p = np.asarray(p, np.float64)
        flat = p.reshape(-1, 2)
        return self.base(self.D.lookup(flat)).reshape(p.shape[:-1] + (3,))


def _edit_pass(image: RasterImage, fields: ImageFields, axis: str, extra: dict, job: EditJob):
    """One unit-scale pass along ``axis`` without the monotonicity term."""
    domain = ImageDomain(image.width, image.height, axis, 1.0)
    samples = domain.samples()
    rjob = RetargetJob(axis=axis, alpha=1.0, weights=job.weights, init_schedule=job.init_schedule,
                       schedule=job.schedule, seed=job.seed)
    D = init_uniform(rjob, samples, 1.0)
    spec = LossSpec("shrink", 1.0, job.weights, monotonic=False, extra=extra)
    D, history = optimize(D, samples, fields.cumulative[axis], fields.energy, spec, job.schedule)
    return D, history, domain, samples


def remove_object(job: EditJob, fields: ImageFields | None = None) -> EditResult:
    """Optimise ``D`` at unit scale so no lookup lands inside the mask.

    An infeasible mask (e.g. the whole image) is not an error: the returned
    ``residual`` (final removal loss) stays large.
    """
    if job.mode != "remove":
        raise ValueError("remove_object needs an EditJob with mode 'remove'")
    mask = build_mask_field(job.mask, job.sigma, (job.image.height, job.image.width))
    if fields is None:
        fields = train_fields(job.image, (job.axis,), job.field_schedules, job.seed)
    extra = {"removal": (job.edit_weight, removal_term(mask))}
    D, history, domain, samples = _edit_pass(job.image, fields, job.axis, extra, job)
    residual = loss_removal(D, mask, domain.grid().reshape(-1, 2), job.axis)
    return EditResult(render_output(D, fields.image, domain), [D], [history], residual)


def move_object(job: EditJob, fields: ImageFields | None = None) -> EditResult:
    """Move the masked object by ``job.offset``, one axis at a time (larger component first).

    The second pass reads the first pass's result through a composed image
    field; its energy fields are refitted on the intermediate raster.
    """
    if job.mode != "move":
        raise ValueError("move_object needs an EditJob with mode 'move'")
    mask = build_mask_field(job.mask, job.sigma, (job.image.height, job.image.width))
    order = sorted((a for a in (0, 1) if job.offset[a] != 0), key=lambda a: -abs(job.offset[a]))
    if not order:
        order = [axis_index(job.axis)]
    names = ("x", "y")
    image = job.image
    if fields is None:
        fields = train_fields(image, tuple(names[a] for a in order), job.field_schedules, job.seed)
    current = fields
    done = np.zeros(2)
    Ds, logs, residual = [], [], 0.0
    for k, a in enumerate(order):
        axis = names[a]
        if k > 0:
            image = render_output(Ds[-1], current.image, ImageDomain(image.width, image.height, names[order[k - 1]], 1.0))
            base = DeformedImageField(current.image, Ds[-1], image.width, image.height)
            current = train_fields(image, (axis,), job.field_schedules, job.seed + 17 * k, image_field=base)
        m = mask.translated(done)
        extra = {"move": (job.edit_weight, move_term(m, job.offset[a]))}
        D, history, domain, samples = _edit_pass(image, current, axis, extra, job)
        residual = loss_move(D, m, job.offset[a], domain.grid().reshape(-1, 2), axis)
        Ds.append(D)
        logs.append(history)
        done[a] = job.offset[a]
    final_domain = ImageDomain(image.width, image.height, names[order[-1]], 1.0)
    return EditResult(render_output(Ds[-1], current.image, final_domain), Ds, logs, residual)


def object_centroid(image: RasterImage, background: int = 128, tol: int = 20) -> tuple[float, float]:
    """Centroid ``(x, y)`` in pixels of the pixels that differ from a flat background."""
    diff = np.abs(image.pixels.astype(int) - background).max(axis=2) > tol
    rows, cols = np.nonzero(diff)
    if len(rows) == 0:
        return float("nan"), float("nan")
    return float(cols.mean() + 0.5), float(rows.mean() + 0.5)


def residual_energy(image: RasterImage, mask) -> float:
    """Mean per-pixel gradient energy inside ``mask``."""
    m = np.asarray(mask, bool)
    return float(pixel_energy(image)[m].mean()) if m.any() else 0.0
