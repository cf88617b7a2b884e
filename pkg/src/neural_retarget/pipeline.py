"""End-to-end image retargeting: fit fields, initialise, optimise, render."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .deform import (DeformationField, EpochLog, ImageDomain, RetargetJob, fold_map, init_residual,
                     init_uniform, job_spec, optimize, render_output, residuals)
from .fields import (CUMULATIVE_SCHEDULE, ENERGY_SCHEDULE, IMAGE_SCHEDULE, CumulativeEnergyField,
                     EnergyField, ImageField, Schedule, cumulative_targets, pixel_energy,
                     train_cumulative_energy, train_energy_field, train_image_field)
from .raster import RasterImage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FieldSchedules:
    image: Schedule = IMAGE_SCHEDULE
    energy: Schedule = ENERGY_SCHEDULE
    cumulative: Schedule = CUMULATIVE_SCHEDULE


@dataclass
class ImageFields:
    """Trained fields of one raster: colour, pointwise energy and per-axis cumulative energy."""

    image: ImageField
    energy: EnergyField
    cumulative: dict[str, CumulativeEnergyField] = field(default_factory=dict)
    width: int = 0
    height: int = 0


def train_fields(image: RasterImage, axes=("x",), schedules: FieldSchedules = FieldSchedules(),
                 seed: int = 0, image_field: ImageField | None = None) -> ImageFields:
    """Fit I (unless given), E and one cumulative field per axis.

    Each network gets its own seed derived from ``seed`` so results do not
    depend on which fields are trained.
    """
    e = pixel_energy(image)
    if image_field is None:
        log.info("training image field (%d iterations)", schedules.image.total)
        image_field = train_image_field(image, schedules.image, seed=seed)
    log.info("training energy field (%d iterations)", schedules.energy.total)
    energy = train_energy_field(e, schedules.energy, seed=seed + 1)
    cum = {}
    for k, axis in enumerate(axes):
        log.info("training cumulative energy along %s (%d iterations)", axis, schedules.cumulative.total)
        cum[axis] = train_cumulative_energy(cumulative_targets(image, axis), axis, schedules.cumulative,
                                            seed=seed + 2 + k)
    return ImageFields(image_field, energy, cum, image.width, image.height)


@dataclass
class RetargetResult:
    image: RasterImage
    fold: RasterImage
    deformation: DeformationField
    log: list[EpochLog]
    residuals: dict[str, float]
    init_residual: float


def retarget_image(image: RasterImage, job: RetargetJob, fields: ImageFields | None = None,
                   schedules: FieldSchedules = FieldSchedules(), on_epoch=None) -> RetargetResult:
    """Retarget ``image`` along ``job.axis`` by ``job.alpha``."""
    if fields is None or job.axis not in fields.cumulative:
        fields = train_fields(image, (job.axis,), schedules, job.seed,
                              image_field=fields.image if fields else None)
    domain = ImageDomain(image.width, image.height, job.axis, job.alpha)
    samples = domain.samples()
    alpha = domain.alpha_eff
    D = init_uniform(job, samples, alpha)
    r0 = init_residual(D, samples, alpha)
    log.info("uniform init residual RMS %.2e", r0)
    D, history = optimize(D, samples, fields.cumulative[job.axis], fields.energy,
                          job_spec(job, alpha), job.schedule, on_epoch=on_epoch)
    res = residuals(D, samples, alpha, job.mode, job.cap_kappa)
    out = render_output(D, fields.image, domain)
    return RetargetResult(out, fold_map(D, domain), D, history, res, r0)


def loss_log_csv(history: list[EpochLog]) -> str:
    """Per-epoch loss log with columns epoch, L_e, L_s, L_b, L_m, L_cap, total."""
    cols = ("energy", "shear", "boundary", "monotonic", "cap")
    lines = ["epoch,L_e,L_s,L_b,L_m,L_cap,total"]
    for e in history:
        vals = [e.terms.get(c, 0.0) for c in cols]
        lines.append(",".join([str(e.epoch)] + [f"{v:.9g}" for v in vals] + [f"{e.total:.9g}"]))
    return "\n".join(lines) + "\n"


def identity_resample(fields: ImageFields) -> RasterImage:
    """The image field rendered at the input's own pixel centres."""
    return fields.image.render(fields.width, fields.height)

