"""Deformation fields, their content-aware and sanity losses, and optimisation.

A deformation field ``D`` maps an output-domain point ``p`` to a scalar offset
along the retargeting axis ``v``; output colour at ``p`` is the input colour at
``p + v * D(p)``. Output coordinates are expressed in input-normalised units,
so along ``v`` the output occupies ``[0, alpha]`` and the boundary targets are
``D = 0`` at the start and ``D = 1 - alpha`` at the end.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import ImageField, ScalarField, Schedule, TrainingError
from .nn import MLP, Adam, NetworkConfig, NumericError, fit
from .raster import RasterImage, axis_index, pixel_centers

log = logging.getLogger(__name__)

DEFORM_CONFIG = NetworkConfig(input_dim=2, hidden_channels=64, hidden_layers=4,
                              encoding_bands=8, output_dim=1, output_activation="identity")
TERMS = ("energy", "shear", "boundary", "monotonic", "cap")


@dataclass(frozen=True)
class LossWeights:
    energy: float = 10000.0
    shear: float = 250.0
    boundary: float = 10000.0
    monotonic: float = 10000.0
    cap: float = 10000.0

    def __post_init__(self):
        for name in TERMS:
            w = getattr(self, name)
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"weight {name} must be finite and >= 0, got {w}")


@dataclass
class RetargetJob:
    axis: str = "x"
    alpha: float = 0.5
    mode: str | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    init_schedule: Schedule = Schedule(epochs=50, iterations=100)
    schedule: Schedule | None = None
    eps: float | None = None
    cap_kappa: float = 0.5
    seed: int = 0
    config: NetworkConfig = DEFORM_CONFIG

    def __post_init__(self):
        axis_index(self.axis)
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.mode is None:
            self.mode = "shrink" if self.alpha <= 1 else "expand"
        if self.mode == "shrink" and not self.alpha <= 1:
            raise ValueError("shrink needs alpha in (0, 1]")
        if self.mode == "expand" and not self.alpha > 1:
            raise ValueError("expand needs alpha > 1")
        if self.mode not in ("shrink", "expand"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 < self.cap_kappa < 1:
            raise ValueError("cap_kappa must lie in (0, 1)")
        if self.schedule is None:
            self.schedule = Schedule(50, 100, lr=0.001 if self.mode == "shrink" else 0.0001)


# -- geometry ------------------------------------------------------------------

@dataclass(frozen=True)
class ImageDomain:
    """Output pixel grid of a retargeting job, in input-normalised units."""

    in_width: int
    in_height: int
    axis: str
    alpha: float

    @property
    def vi(self) -> int:
        return axis_index(self.axis)

    @property
    def out_size(self) -> tuple[int, int]:
        w, h = self.in_width, self.in_height
        if self.vi == 0:
            return max(1, round(self.alpha * w)), h
        return w, max(1, round(self.alpha * h))

    @property
    def alpha_eff(self) -> float:
        """Scale actually realised by the integer output size."""
        ow, oh = self.out_size
        return ow / self.in_width if self.vi == 0 else oh / self.in_height

    @property
    def eps(self) -> float:
        return 1.0 / (self.in_width if self.vi == 0 else self.in_height)

    @property
    def eps_perp(self) -> float:
        return 1.0 / (self.in_height if self.vi == 0 else self.in_width)

    def grid(self) -> np.ndarray:
        """Output pixel centres, shape ``(out_h, out_w, 2)``."""
        ow, oh = self.out_size
        return pixel_centers(ow, oh, self.in_width, self.in_height)

    def samples(self) -> "Samples":
        """Loss samples on the half-pixel lattice along the axis.

        Points sit at every pixel edge and every pixel centre, and each pair
        ``(p, p + eps)`` spans one pixel. The pairs cover ``[0, alpha]`` with no
        gap, and the render points (centres) and both boundaries are part of
        the lattice, so ``D`` cannot hide oscillations between samples that
        rendering would see.
        """
        ow, oh = self.out_size
        vi, ui = self.vi, 1 - self.vi
        n_v = ow if vi == 0 else oh
        steps = np.arange(2 * n_v - 1) * (0.5 * self.eps)
        rows = (np.arange(oh if vi == 0 else ow) + 0.5) * self.eps_perp
        gv, gu = np.meshgrid(steps, rows)
        p = np.empty((gv.size, 2))
        p[:, vi] = gv.ravel()
        p[:, ui] = gu.ravel()
        across = (np.arange(oh if vi == 0 else ow) + 0.5) / (self.in_height if vi == 0 else self.in_width)
        b0 = np.zeros((len(across), 2))
        b0[:, ui] = across
        b1 = b0.copy()
        b1[:, vi] = self.alpha_eff
        return Samples(p, vi, self.eps, [self.eps_perp], b0, b1)


@dataclass
class Samples:
    """Points at which the losses evaluate ``D``.

    ``perp_eps`` lists one finite-difference step per direction orthogonal to
    the axis (one for images, two for 3D); offsets follow coordinate order.
    """

    points: np.ndarray
    vi: int
    eps: float
    perp_eps: list[float]
    boundary0: np.ndarray
    boundary1: np.ndarray

    def perp_axes(self) -> list[int]:
        d = self.points.shape[1]
        return [a for a in range(d) if a != self.vi][: len(self.perp_eps)]

    def groups(self) -> dict[str, np.ndarray]:
        p = self.points
        pe = p.copy()
        pe[:, self.vi] += self.eps
        out = {"p": p, "pe": pe}
        for k, (a, e) in enumerate(zip(self.perp_axes(), self.perp_eps)):
            pp = p.copy()
            pp[:, a] += e
            out[f"perp{k}"] = pp
        out["b0"] = self.boundary0
        out["b1"] = self.boundary1
        return out

    def stacked(self):
        g = self.groups()
        names = list(g)
        sizes = [len(g[n]) for n in names]
        return np.concatenate([g[n] for n in names]), names, sizes


# -- deformation field ---------------------------------------------------------

class DeformationField:
    """Network ``D`` plus the axis and scale it was built for."""

    def __init__(self, net: MLP, axis: str, alpha: float):
        self.net = net
        self.axis = axis
        self.alpha = alpha

    @property
    def vi(self) -> int:
        return axis_index(self.axis) if isinstance(self.axis, str) else int(self.axis)

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p)
        return self.net.forward(p.reshape(-1, p.shape[-1]))[:, 0].astype(np.float64)

    def lookup(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, self.net.config.input_dim)
        q = p.copy()
        q[:, self.vi] += self(p)
        return q


def uniform_offset(p, vi: int, alpha: float) -> np.ndarray:
    """Offset of the linear map taking output ``[0, alpha]`` onto input ``[0, 1]``."""
    return np.asarray(p)[:, vi] * (1.0 - alpha) / alpha


def init_uniform(job: RetargetJob, samples: Samples, alpha: float | None = None,
                 seed: int | None = None) -> DeformationField:
    """Regress a fresh ``D`` onto the uniform stretch at the lattice and boundary points."""
    alpha = job.alpha if alpha is None else alpha
    x = np.concatenate([samples.points, samples.boundary0, samples.boundary1])
    net = MLP.init(job.config, job.seed if seed is None else seed)
    target = uniform_offset(x, samples.vi, alpha)[:, None]
    opt = Adam(lr=job.init_schedule.lr)
    settle = job.init_schedule.epochs - max(1, job.init_schedule.epochs // 5)
    for ep in range(job.init_schedule.epochs):
        if ep == settle:
            opt.lr = job.init_schedule.lr * 0.1  # final fifth: settle below Adam's step noise
        try:
            fit(net, x, target, job.init_schedule.iterations, opt=opt, name="init-uniform")
        except NumericError as exc:
            raise TrainingError("init-uniform", f"uniform initialisation diverged in epoch {ep}") from exc
    return DeformationField(net, job.axis if samples.points.shape[1] == 2 else samples.vi, alpha)


# -- loss terms on D values ----------------------------------------------------
#
# Each helper takes the D values at the sample groups and returns
# (value, {group: dvalue/dD}). Gradients use subgradient 0 at |.| and max kinks.

def _shift(points, vi, d):
    q = np.array(points, dtype=np.float64, copy=True)
    q[:, vi] += d
    return q


def _content_cumulative(d, samples, sigma: ScalarField):
    p, pe, eps, vi = samples.points, None, samples.eps, samples.vi
    n = len(d["p"])
    g = samples.groups()
    q = _shift(g["p"], vi, d["p"])
    qe = _shift(g["pe"], vi, d["pe"])
    s, pull = sigma.value_and_pullback(np.concatenate([q, qe]))
    s = np.asarray(s, np.float64)
    a = s[:n] - s[n:]
    b = d["p"] - d["pe"]
    value = float(np.mean(np.abs(a) * np.abs(b)) / eps)
    ga = np.sign(a) * np.abs(b) / (eps * n)
    gb = np.sign(b) * np.abs(a) / (eps * n)
    dq = np.asarray(pull(np.concatenate([ga, -ga])), np.float64)[:, vi]
    return value, {"p": dq[:n] + gb, "pe": dq[n:] - gb}


def _pointwise_energy_terms(d, samples, energy: ScalarField, with_content: bool):
    """Shear term(s), plus the expand-mode content term, sharing one E(q) evaluation."""
    n, vi = len(d["p"]), samples.vi
    q = _shift(samples.points, vi, d["p"])
    ev, pull = energy.value_and_pullback(q)
    ev = np.asarray(ev, np.float64)
    grads = {"p": np.zeros(n)}
    ge = np.zeros(n)
    shear = 0.0
    for k, e in enumerate(samples.perp_eps):
        b = d["p"] - d[f"perp{k}"]
        shear += float(np.mean(ev * np.abs(b)) / e)
        ge += np.abs(b) / (e * n)
        gb = np.sign(b) * ev / (e * n)
        grads["p"] += gb
        grads[f"perp{k}"] = -gb
    grads["p"] += np.asarray(pull(ge), np.float64)[:, vi]
    out = {"shear": (shear, grads)}
    if with_content:
        b = d["p"] - d["pe"]
        content = float(np.mean(ev * np.abs(b)) / samples.eps)
        gb = np.sign(b) * ev / (samples.eps * n)
        dq = np.asarray(pull(np.abs(b) / (samples.eps * n)), np.float64)[:, vi]
        out["energy"] = (content, {"p": gb + dq, "pe": -gb})
    return out


def _boundary(d, alpha):
    r1 = d["b1"] - (1.0 - alpha)
    value = float(np.mean(np.abs(d["b0"])) + np.mean(np.abs(r1)))
    return value, {"b0": np.sign(d["b0"]) / len(d["b0"]), "b1": np.sign(r1) / len(r1)}


def _monotonic(d, eps, mode):
    n = len(d["p"])
    # shrink: D must not decrease along v; expand: D must not increase along v
    r = (d["p"] - d["pe"]) / eps if mode == "shrink" else (d["pe"] - d["p"]) / eps
    value = float(np.mean(np.maximum(r, 0)))
    g = (r > 0) / (eps * n)
    if mode == "shrink":
        return value, {"p": g, "pe": -g}
    return value, {"p": -g, "pe": g}


def _cap(d, eps, kappa):
    n = len(d["p"])
    r = (d["p"] - d["pe"]) / eps - kappa
    value = float(np.mean(np.maximum(r, 0)))
    g = (r > 0) / (eps * n)
    return value, {"p": g, "pe": -g}


@dataclass
class LossSpec:
    """Which terms to evaluate and how they are weighted."""

    mode: str
    alpha: float
    weights: LossWeights
    kappa: float = 0.5
    monotonic: bool = True
    extra: dict[str, tuple[float, Callable]] = field(default_factory=dict)


def evaluate_terms(d: dict[str, np.ndarray], samples: Samples, sigma: ScalarField | None,
                   energy: ScalarField | None, spec: LossSpec):
    """Weighted total, raw per-term values and ``dtotal/dD`` per sample group.

    ``spec.extra`` maps a name to ``(weight, fn)`` with
    ``fn(d, samples) -> (value, {group: grad})``.
    """
    w = spec.weights
    terms: dict[str, tuple[float, dict]] = {}
    if w.energy > 0 and spec.mode == "shrink":
        if sigma is None:
            raise ValueError("shrink mode needs a cumulative energy field")
        terms["energy"] = _content_cumulative(d, samples, sigma)
    need_e = w.shear > 0 or (spec.mode == "expand" and w.energy > 0)
    if need_e:
        if energy is None:
            raise ValueError("shear / expand content terms need an energy field")
        terms.update(_pointwise_energy_terms(d, samples, energy, spec.mode == "expand" and w.energy > 0))
    terms["boundary"] = _boundary(d, spec.alpha)
    if spec.monotonic:
        terms["monotonic"] = _monotonic(d, samples.eps, spec.mode)
    if spec.mode == "expand":
        terms["cap"] = _cap(d, samples.eps, spec.kappa)
    weights = {t: getattr(w, t) for t in TERMS}
    for name, (weight, fn) in spec.extra.items():
        terms[name] = fn(d, samples)
        weights[name] = weight

    values = {}
    total = 0.0
    grads = {k: np.zeros(len(v)) for k, v in d.items()}
    for name, (value, g) in terms.items():
        if not math.isfinite(value):
            raise NumericError(name, f"loss term {name} is not finite")
        values[name] = value
        lam = weights[name]
        total += lam * value
        for grp, arr in g.items():
            grads[grp] += lam * arr
    return total, values, grads


def _split(y, names, sizes):
    out, off = {}, 0
    for n, s in zip(names, sizes):
        out[n] = y[off:off + s]
        off += s
    return out


def evaluate_deformation(D, samples: Samples, sigma, energy, spec: LossSpec):
    """Total and per-term losses for any callable ``D`` (no parameter gradients)."""
    x, names, sizes = samples.stacked()
    d = _split(np.asarray(D(x), np.float64).reshape(-1), names, sizes)
    total, values, _ = evaluate_terms(d, samples, sigma, energy, spec)
    return total, values


def loss_gradient(D: DeformationField, samples: Samples, sigma, energy, spec: LossSpec):
    """Total loss, per-term values and parameter gradients of ``D``'s network."""
    x, names, sizes = samples.stacked()
    y, cache = D.net.forward_cached(x)
    d = _split(y[:, 0].astype(np.float64), names, sizes)
    total, values, g = evaluate_terms(d, samples, sigma, energy, spec)
    dy = np.concatenate([g[n] for n in names])[:, None]
    grads, _ = D.net.backward(cache, dy, input_grad=False)
    return total, values, grads


# -- public single-term losses -------------------------------------------------

def _d_at(D, pts):
    return np.asarray(D(np.asarray(pts, np.float64)), np.float64).reshape(-1)


def _pe(points, vi, eps):
    return _shift(points, vi, eps)


def loss_content(D, sigma: ScalarField, points, eps: float, axis) -> float:
    """Mean of ``|S(q) - S(q_eps)| * |D(p) - D(p_eps)| / eps`` (cumulative energy S)."""
    vi = axis_index(axis) if isinstance(axis, str) else axis
    s = Samples(np.asarray(points, np.float64), vi, eps, [], np.zeros((0, 2)), np.zeros((0, 2)))
    d = {"p": _d_at(D, points), "pe": _d_at(D, _pe(points, vi, eps))}
    return _content_cumulative(d, s, sigma)[0]


def loss_content_pointwise(D, energy: ScalarField, points, eps: float, axis) -> float:
    """Expand-mode content loss: mean of ``E(q) * |D(p) - D(p_eps)| / eps``."""
    vi = axis_index(axis) if isinstance(axis, str) else axis
    points = np.asarray(points, np.float64)
    q = _shift(points, vi, _d_at(D, points))
    b = _d_at(D, points) - _d_at(D, _pe(points, vi, eps))
    return float(np.mean(np.asarray(energy(q)) * np.abs(b)) / eps)


def loss_shear(D, energy: ScalarField, points, eps: float, axis) -> float:
    """Mean of ``E(q) * |D(p) - D(p + eps * v_perp)| / eps`` summed over orthogonal axes."""
    vi = axis_index(axis) if isinstance(axis, str) else axis
    points = np.asarray(points, np.float64)
    dp = _d_at(D, points)
    ev = np.asarray(energy(_shift(points, vi, dp)), np.float64)
    total = 0.0
    for a in [a for a in range(points.shape[1]) if a != vi][: 1 if points.shape[1] == 2 else 2]:
        pp = points.copy()
        pp[:, a] += eps
        total += float(np.mean(ev * np.abs(dp - _d_at(D, pp))) / eps)
    return total


def loss_boundary(D, alpha: float, boundary0, boundary1) -> float:
    if len(boundary0) == 0 or len(boundary1) == 0:
        raise ValueError("boundary sample sets must be nonempty")
    return _boundary({"b0": _d_at(D, boundary0), "b1": _d_at(D, boundary1)}, alpha)[0]


def loss_monotonic(D, points, eps: float, axis, mode: str = "shrink") -> float:
    vi = axis_index(axis) if isinstance(axis, str) else axis
    if eps <= 0:
        raise ValueError("eps must be > 0")
    d = {"p": _d_at(D, points), "pe": _d_at(D, _pe(points, vi, eps))}
    return _monotonic(d, eps, mode)[0]


def loss_cap(D, points, eps: float, axis, kappa: float = 0.5) -> float:
    vi = axis_index(axis) if isinstance(axis, str) else axis
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if not 0 < kappa < 1:
        raise ValueError("kappa must lie in (0, 1)")
    d = {"p": _d_at(D, points), "pe": _d_at(D, _pe(points, vi, eps))}
    return _cap(d, eps, kappa)[0]


def job_spec(job: RetargetJob, alpha: float | None = None) -> LossSpec:
    return LossSpec(job.mode, job.alpha if alpha is None else alpha, job.weights, job.cap_kappa)


def total_loss(job: RetargetJob, D, sigma, energy, samples: Samples, alpha: float | None = None):
    """Weighted total and per-term breakdown for ``job``'s mode."""
    return evaluate_deformation(D, samples, sigma, energy, job_spec(job, alpha))


# -- optimisation --------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    terms: dict[str, float]
    total: float


def optimize(D: DeformationField, samples: Samples, sigma, energy, spec: LossSpec,
             schedule: Schedule, keep_best: bool = False, on_epoch=None,
             sample_fn: Callable | None = None, after_step: Callable | None = None):
    """Adam on the weighted loss; returns ``(D, log)``.

    ``sample_fn(it)`` may supply fresh :class:`Samples` per iteration and
    ``after_step(samples)`` runs after every D update (used for the inverse
    network in 3D). With ``keep_best`` the parameters of the epoch with the
    lowest mean total are restored at the end; otherwise the final ones are kept.
    """
    opt = Adam(lr=schedule.lr)
    history: list[EpochLog] = []
    best = (math.inf, None, None)
    it = 0
    for ep in range(schedule.epochs):
        sums: dict[str, float] = {}
        tot = 0.0
        for _ in range(schedule.iterations):
            s = sample_fn(it) if sample_fn else samples
            try:
                total, values, grads = loss_gradient(D, s, sigma, energy, spec)
            except NumericError as exc:
                raise TrainingError(exc.term, f"deformation diverged in epoch {ep}: {exc}") from exc
            opt.step(D.net.params, grads)
            if after_step:
                after_step(s)
            tot += total
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            it += 1
        k = schedule.iterations
        entry = EpochLog(ep, {t: v / k for t, v in sums.items()}, tot / k)
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
        if keep_best and entry.total < best[0]:
            best = (entry.total, D.net.copy(), ep)
    if keep_best and best[1] is not None:
        D.net.params = best[1].params
    return D, history


def optimize_image(job: RetargetJob, domain: ImageDomain, sigma, energy,
                   D_init: DeformationField, on_epoch=None):
    samples = domain.samples()
    return optimize(D_init, samples, sigma, energy, job_spec(job, domain.alpha_eff),
                    job.schedule, on_epoch=on_epoch)


# -- output --------------------------------------------------------------------

def render_output(D, image: ImageField, domain: ImageDomain) -> RasterImage:
    """Colour each output pixel centre with the field value at its lookup point."""
    grid = domain.grid()
    oh, ow = grid.shape[:2]
    p = grid.reshape(-1, 2)
    q = _shift(p, domain.vi, _d_at(D, p))
    return RasterImage.from_float(image(q).reshape(oh, ow, 3))


def fold_map(D, domain: ImageDomain) -> RasterImage:
    """``|dD/dv|`` per output pixel, scaled so the maximum is 255.

    The derivative is the difference of ``D`` across each pixel's extent along
    the axis; a field with no variation gives a black image.
    """
    grid = domain.grid()
    oh, ow = grid.shape[:2]
    p = grid.reshape(-1, 2)
    h = domain.eps / 2
    deriv = np.abs(_d_at(D, _shift(p, domain.vi, h)) - _d_at(D, _shift(p, domain.vi, -h))) / domain.eps
    peak = deriv.max()
    if not peak > 1e-12:
        return RasterImage(np.zeros((oh, ow, 3), np.uint8))
    g = np.floor(deriv / peak * 255.0 + 0.5).astype(np.uint8).reshape(oh, ow)
    return RasterImage(np.repeat(g[..., None], 3, axis=2))


def init_residual(D, samples: Samples, alpha: float) -> float:
    """RMS distance of ``D`` from the uniform stretch over the lattice and boundaries."""
    x = np.concatenate([samples.points, samples.boundary0, samples.boundary1])
    return float(np.sqrt(np.mean((_d_at(D, x) - uniform_offset(x, samples.vi, alpha)) ** 2)))


def residuals(D, samples: Samples, alpha: float, mode: str, kappa: float = 0.5) -> dict[str, float]:
    """Sanity residuals of a finished field: boundary, monotonicity and cap losses."""
    x, names, sizes = samples.stacked()
    d = _split(_d_at(D, x), names, sizes)
    out = {"boundary": _boundary(d, alpha)[0], "monotonic": _monotonic(d, samples.eps, mode)[0]}
    if mode == "expand":
        out["cap"] = _cap(d, samples.eps, kappa)[0]
    return out
