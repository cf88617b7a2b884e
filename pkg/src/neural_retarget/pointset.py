"""Retargeting of 3D point sets: energy smoothing, clamped energy net,
ray-accumulated cumulative energy, inverse field and deformation optimisation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .deform import (DeformationField, EpochLog, LossSpec, LossWeights, Samples, optimize, uniform_offset)
from .fields import NetScalarField, ScalarField, Schedule, TrainingError
from .nn import MLP, Adam, NetworkConfig, NumericError, fit_sampled

log = logging.getLogger(__name__)

CONFIG_3D = NetworkConfig(input_dim=3, hidden_channels=64, hidden_layers=4, encoding_bands=8,
                          output_dim=1, output_activation="identity")
WEIGHTS_3D = LossWeights(energy=10.0, shear=0.1, boundary=100.0, monotonic=1.0, cap=100.0)
EPS_3D = 1.0 / 256
RAY_SAMPLES = 100


@dataclass
class PointSetScene:
    points: np.ndarray
    energy: np.ndarray
    axis: int = 0
    alpha: float = 0.5
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, np.float64)
        self.energy = np.asarray(self.energy, np.float64).reshape(-1)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if len(self.energy) != len(self.points):
            raise ValueError("one energy value per point is required")
        if not np.all(np.isfinite(self.energy)) or np.any(self.energy < 0):
            raise ValueError("energies must be finite and >= 0")
        if self.axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {self.axis}")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError("alpha must be > 0")

    @property
    def mode(self) -> str:
        return "shrink" if self.alpha <= 1 else "expand"

    def __len__(self):
        return len(self.points)


def knn(points, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``k`` nearest neighbours of every point, itself included."""
    tree = cKDTree(points)
    dist, idx = tree.query(points, k=k)
    return dist.reshape(len(points), k), idx.reshape(len(points), k)


def smooth_energy(scene: PointSetScene, k: int = 5) -> np.ndarray:
    """Minimum raw energy over each point's ``k`` nearest neighbours (itself included)."""
    if k < 1 or len(scene) <= k:
        raise ValueError(f"need 1 <= k < N, got k={k}, N={len(scene)}")
    _, idx = knn(scene.points, k)
    return scene.energy[idx].min(axis=1)


def raw_energy(points, colors, axis: int = 0, k: int = 8) -> np.ndarray:
    """Local colour variance plus local variance of the axis coordinate over ``k`` neighbours, equally weighted."""
    points = np.asarray(points, np.float64)
    colors = np.asarray(colors, np.float64)
    if colors.max() > 1:
        colors = colors / 255.0
    _, idx = knn(points, min(k, len(points)))
    cvar = colors[idx].var(axis=1).sum(axis=1)
    dvar = points[idx][:, :, axis].var(axis=1)
    return cvar + dvar


def mean_nn_distance(points) -> float:
    d, _ = knn(points, 2)
    return float(d[:, 1].mean())


class EnergyField3D(ScalarField):
    """Energy network whose output is clamped to 0 farther than ``radius`` from every training point."""

    def __init__(self, net: MLP, points, radius: float):
        self.net = NetScalarField(net, nonnegative=True)
        self.points = np.asarray(points, np.float64)
        self.radius = float(radius)
        self._tree = cKDTree(self.points)

    def near(self, p) -> np.ndarray:
        d, _ = self._tree.query(np.asarray(p, np.float64).reshape(-1, 3), k=1)
        return d <= self.radius

    def __call__(self, p):
        p = np.asarray(p, np.float64).reshape(-1, 3)
        return np.where(self.near(p), self.net(p), 0.0)

    def value_and_pullback(self, p):
        p = np.asarray(p, np.float64).reshape(-1, 3)
        inside = self.near(p)
        y, pull = self.net.value_and_pullback(p)
        return np.where(inside, y, 0.0), lambda g: pull(np.where(inside, g, 0.0))


def train_energy_net(scene: PointSetScene, energies=None, schedule: Schedule = Schedule(50, 100),
                     batch: int = 10000, seed: int = 0, config: NetworkConfig = CONFIG_3D) -> EnergyField3D:
    """Fit per-point energies by MSE on random batches; clamp radius is twice the mean NN distance."""
    e = smooth_energy(scene) if energies is None else np.asarray(energies, np.float64)
    net = MLP.init(config, seed)
    pts = scene.points
    b = min(batch, len(pts))

    def sampler(rng):
        idx = rng.choice(len(pts), size=b, replace=False) if b < len(pts) else np.arange(len(pts))
        return pts[idx], e[idx][:, None]

    _fit_epochs(net, sampler, schedule, seed, "energy-3d")
    return EnergyField3D(net, pts, 2.0 * mean_nn_distance(pts))


def _fit_epochs(net, sampler, schedule: Schedule, seed, name):
    opt = Adam(lr=schedule.lr)
    for ep in range(schedule.epochs):
        try:
            fit_sampled(net, sampler, schedule.iterations, opt=opt, seed=[seed, ep], name=name)
        except NumericError as exc:
            raise TrainingError(name, f"{name} diverged in epoch {ep}") from exc


class CumulativeEnergyField3D(NetScalarField):
    def __init__(self, net: MLP, axis: int):
        super().__init__(net)
        self.axis = axis

    def segment_energy(self, p, q) -> np.ndarray:
        return np.abs(self(q) - self(p))


def ray_targets(E3: ScalarField, axis: int, rays: int, seed: int = 0, samples: int = RAY_SAMPLES):
    """Random rays parallel to ``axis`` with running midpoint sums of ``E3``.

    Returns points ``(rays * samples, 3)`` and cumulative targets; the target
    at a sample integrates the energy from the domain face up to it.
    """
    rng = np.random.default_rng(seed)
    t = (np.arange(samples) + 0.5) / samples
    pts = np.empty((rays, samples, 3))
    others = [a for a in range(3) if a != axis]
    cross = rng.random((rays, 2))
    pts[:, :, axis] = t[None, :]
    pts[:, :, others[0]] = cross[:, :1]
    pts[:, :, others[1]] = cross[:, 1:]
    e = np.asarray(E3(pts.reshape(-1, 3)), np.float64).reshape(rays, samples)
    cum = (np.cumsum(e, axis=1) - 0.5 * e) / samples
    return pts.reshape(-1, 3), cum.reshape(-1)


def train_cumulative_3d(scene: PointSetScene, E3: ScalarField, schedule: Schedule = Schedule(100, 100),
                        batch: int = 10000, rays: int = 2000, seed: int = 0,
                        config: NetworkConfig = CONFIG_3D) -> CumulativeEnergyField3D:
    """Fit the cumulative field to ray-accumulated energies from a fixed ray pool."""
    pts, target = ray_targets(E3, scene.axis, rays, seed)
    if not np.all(np.isfinite(target)):
        raise TrainingError("cumulative-3d", "ray targets are not finite")
    net = MLP.init(config, seed + 1)
    b = min(batch, len(pts))

    def sampler(rng):
        idx = rng.choice(len(pts), size=b, replace=False)
        return pts[idx], target[idx][:, None]

    _fit_epochs(net, sampler, schedule, seed + 1, "cumulative-3d")
    return CumulativeEnergyField3D(net, scene.axis)


# -- inverse field -------------------------------------------------------------

class InverseField:
    """Network ``U`` giving, for a source point ``x``, the target point ``x + v U(x)``."""

    def __init__(self, net: MLP, axis: int, opt: Adam | None = None):
        self.net = net
        self.axis = axis
        self.opt = opt or Adam()

    def __call__(self, x) -> np.ndarray:
        return self.net.forward(np.asarray(x).reshape(-1, 3))[:, 0].astype(np.float64)

    def target(self, x) -> np.ndarray:
        x = np.asarray(x, np.float64).reshape(-1, 3)
        t = x.copy()
        t[:, self.axis] += self(x)
        return t


def inverse_loss_gradient(U: InverseField, D, x):
    """``mean((t_v + D(t) - x_v)^2)`` with ``t = x + v U(x)``; gradient w.r.t. U's parameters.

    ``D`` is held fixed; its input derivative along ``v`` enters the chain rule.
    """
    vi = U.axis
    x = np.asarray(x, np.float64)
    u, ucache = U.net.forward_cached(x)
    t = x.copy()
    t[:, vi] += u[:, 0]
    dnet = D.net if isinstance(D, DeformationField) else D
    dval, dcache = dnet.forward_cached(t)
    r = t[:, vi] + dval[:, 0].astype(np.float64) - x[:, vi]
    n = len(x)
    loss = float(np.mean(r * r))
    g_out = 2.0 * r / n
    _, dx = dnet.backward(dcache, g_out[:, None].astype(dnet.dtype), param_grads=False)
    g_t = g_out + np.asarray(dx, np.float64)[:, vi]
    grads, _ = U.net.backward(ucache, g_t[:, None].astype(U.net.dtype), input_grad=False)
    return loss, grads


def update_inverse(U: InverseField, D, x) -> float:
    """One Adam step of ``U`` against the current ``D`` on the batch ``x``."""
    loss, grads = inverse_loss_gradient(U, D, x)
    if not math.isfinite(loss):
        raise TrainingError("inverse", "inverse field loss is not finite")
    U.opt.step(U.net.params, grads)
    return loss


def inverse_error(U: InverseField, D, x) -> float:
    """RMS of ``t_v + D(t) - x_v`` over ``x`` (the D-after-U identity error)."""
    t = U.target(x)
    r = t[:, U.axis] + np.asarray(D(t), np.float64) - np.asarray(x)[:, U.axis]
    return float(np.sqrt(np.mean(r * r)))


# -- deformation optimisation --------------------------------------------------

@dataclass
class Retarget3DJob:
    alpha: float = 0.5
    axis: int = 0
    weights: LossWeights = WEIGHTS_3D
    eps: float = EPS_3D
    init_iterations: int = 5000
    energy_schedule: Schedule = Schedule(50, 100)
    cumulative_schedule: Schedule = Schedule(100, 100)
    schedule: Schedule = Schedule(50, 100)
    surface_samples: int = 10000
    uniform_samples: int = 10000
    boundary_samples: int = 10000
    field_batch: int = 10000
    rays: int = 2000
    knn: int = 5
    polish_iterations: int = 0
    cap_kappa: float = 0.5
    seed: int = 0
    config: NetworkConfig = CONFIG_3D

    @property
    def mode(self) -> str:
        return "shrink" if self.alpha <= 1 else "expand"


def _uniform_fit(net: MLP, target_fn, scale, iterations, seed, batch, name, lr=0.001):
    """Regress ``net`` onto ``target_fn(x)`` at uniform random points of the box
    ``[0, scale]``; the last fifth of the iterations runs at a tenth of the rate."""
    if iterations <= 0:
        return
    opt = Adam(lr=lr)
    settle = iterations - max(1, iterations // 5)
    scale = np.asarray(scale, np.float64)

    def sampler(rng):
        x = rng.random((batch, 3)) * scale
        return x, target_fn(x)[:, None]

    fit_sampled(net, sampler, settle, opt=opt, seed=[seed, 0], name=name)
    opt.lr = lr * 0.1
    fit_sampled(net, sampler, iterations - settle, opt=opt, seed=[seed, 1], name=name)


def init_uniform_3d(job: Retarget3DJob, seed: int | None = None):
    """``D`` and ``U`` regressed onto the uniform stretch and its inverse."""
    seed = job.seed if seed is None else seed
    a, vi = job.alpha, job.axis
    target_box = np.ones(3)
    target_box[vi] = a
    dnet = MLP.init(job.config, seed + 10)
    unet = MLP.init(job.config, seed + 11)
    b = min(job.field_batch, 4096)
    _uniform_fit(dnet, lambda t: uniform_offset(t, vi, a), target_box, job.init_iterations,
                 seed + 10, b, "init-uniform-3d")
    _uniform_fit(unet, lambda x: x[:, vi] * (a - 1.0), np.ones(3), job.init_iterations,
                 seed + 11, b, "init-inverse-3d")
    return DeformationField(dnet, vi, a), InverseField(unet, vi)


class SampleStream:
    """Per-iteration 3D loss samples: scene points mapped by U plus uniform points, and two boundary faces."""

    def __init__(self, scene: PointSetScene, U: InverseField, job: Retarget3DJob, seed: int):
        self.scene, self.U, self.job = scene, U, job
        self.rng = np.random.default_rng([seed, 99])
        self.last_source = None

    def __call__(self, it) -> Samples:
        job, vi, a = self.job, self.job.axis, self.job.alpha
        rng = self.rng
        n_s = min(job.surface_samples, len(self.scene))
        idx = rng.choice(len(self.scene), size=n_s, replace=False)
        src = self.scene.points[idx]
        self.last_source = src
        tgt = self.U.target(src)
        tgt[:, vi] = np.clip(tgt[:, vi], 0.0, a - job.eps)
        uni = rng.random((job.uniform_samples, 3))
        uni[:, vi] *= a - job.eps
        pts = np.concatenate([tgt, uni])
        b0 = rng.random((job.boundary_samples, 3))
        b0[:, vi] = 0.0
        b1 = rng.random((job.boundary_samples, 3))
        b1[:, vi] = a
        return Samples(pts, vi, job.eps, [job.eps, job.eps], b0, b1)


@dataclass
class Retarget3DResult:
    D: DeformationField
    U: InverseField
    log: list[EpochLog]
    best_epoch: int
    inverse_rms: float
    fields: tuple = field(default=())


def optimize_deformation_3d(scene: PointSetScene, E3, S3, job: Retarget3DJob, D=None, U=None,
                            on_epoch=None) -> Retarget3DResult:
    """Optimise ``D`` with U updated once per D step; the best epoch's parameters are kept."""
    if D is None or U is None:
        D, U = init_uniform_3d(job)
    stream = SampleStream(scene, U, job, job.seed)
    spec = LossSpec(job.mode, job.alpha, job.weights, job.cap_kappa)
    snapshots = []

    def after_step(_samples):
        update_inverse(U, D, stream.last_source)

    def epoch_hook(entry):
        snapshots.append(U.net.copy())
        if on_epoch:
            on_epoch(entry)

    D, history = optimize(D, None, S3, E3, spec, job.schedule, keep_best=True, on_epoch=epoch_hook,
                          sample_fn=stream, after_step=after_step)
    best = min(range(len(history)), key=lambda i: history[i].total) if history else -1
    if best >= 0:
        U.net.params = snapshots[best].params
    if job.polish_iterations:
        polish_inverse(U, D, scene, job.polish_iterations, job.seed)
    return Retarget3DResult(D, U, history, best, inverse_error(U, D, scene.points))


def polish_inverse(U: InverseField, D, scene: PointSetScene, iterations: int, seed: int = 0, batch=4096):
    """Extra U steps against the final D, then a short low-rate settle."""
    rng = np.random.default_rng([seed, 7])
    settle = iterations - max(1, iterations // 5)
    lr = U.opt.lr
    for it in range(iterations):
        if it == settle:
            U.opt.lr = lr * 0.1
        idx = rng.choice(len(scene), size=min(batch, len(scene)), replace=False)
        update_inverse(U, D, scene.points[idx])
    U.opt.lr = lr


def deform_points(points, U: InverseField) -> np.ndarray:
    """Move source-space points to the retargeted space; only the axis coordinate changes."""
    return U.target(points)


@dataclass
class PointPipelineResult:
    points: np.ndarray
    result: Retarget3DResult
    energy_field: EnergyField3D
    cumulative: CumulativeEnergyField3D


def retarget_points(scene: PointSetScene, job: Retarget3DJob, energies=None, on_epoch=None) -> PointPipelineResult:
    """Smooth energies, fit E3 and the cumulative field, optimise D with U, deform the points."""
    e = smooth_energy(scene, job.knn) if energies is None else np.asarray(energies, np.float64)
    E3 = train_energy_net(scene, e, job.energy_schedule, job.field_batch, job.seed)
    S3 = train_cumulative_3d(scene, E3, job.cumulative_schedule, job.field_batch, job.rays, job.seed + 2)
    D, U = init_uniform_3d(job)
    res = optimize_deformation_3d(scene, E3, S3, job, D, U, on_epoch=on_epoch)
    return PointPipelineResult(deform_points(scene.points, res.U), res, E3, S3)


def two_slabs(n: int = 5000, seed: int = 0, slabs=((0.2, 0.3), (0.7, 0.8)), axis: int = 0) -> PointSetScene:
    """Two axis-perpendicular slabs filled uniformly with points of energy 1."""
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 3))
    which = rng.integers(0, len(slabs), n)
    lo = np.array([s[0] for s in slabs])[which]
    hi = np.array([s[1] for s in slabs])[which]
    pts[:, axis] = lo + (hi - lo) * rng.random(n)
    return PointSetScene(pts, np.ones(n), axis=axis, alpha=0.5)


def slab_extents(points, labels, axis: int = 0, lo_q=1.0, hi_q=99.0) -> list[float]:
    """Robust extent (percentile range) of each labelled group along ``axis``."""
    out = []
    for lab in np.unique(labels):
        v = np.asarray(points)[labels == lab, axis]
        out.append(float(np.percentile(v, hi_q) - np.percentile(v, lo_q)))
    return out
