"""Command-line front end.

Every command takes ``--config job.json`` (validated against a schema that
rejects unknown keys) and the global flags ``--seed``, ``--out``, ``--jobs``
and ``--dry-run``. Exit codes: 0 success, 2 configuration error, 3 numeric or
training failure.
"""

from __future__ import annotations

import os

if os.environ.get("RF_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["RF_THREADS"])

import argparse
import json
import logging
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from .schemas import COMMAND_SCHEMAS, REPORT_SCHEMA

log = logging.getLogger("neural_retarget")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("retarget", "carve", "compare", "remove", "move", "retarget3d", "mesh", "fixtures")


class ConfigError(ValueError):
    pass


# -- files -----------------------------------------------------------------------

def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_png(path: Path, image) -> None:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(image.pixels, "RGB").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_text(path: Path, text: str) -> None:
    atomic_write(path, text.encode())


# -- config ----------------------------------------------------------------------

def load_config(command: str, path: str | None, overrides: dict) -> dict:
    cfg: dict = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    try:
        jsonschema.validate(cfg, COMMAND_SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return cfg


def _schedule(cfg, epochs_key, default_epochs, lr=None):
    from .fields import Schedule

    return Schedule(int(cfg.get(epochs_key, default_epochs)), int(cfg.get("iters", 100)),
                    float(lr if lr is not None else 0.001))


def _field_schedules(cfg):
    from .fields import Schedule
    from .pipeline import FieldSchedules

    fe = cfg.get("field_epochs", {})
    it = int(cfg.get("iters", 100))
    return FieldSchedules(Schedule(fe.get("image", 250), it), Schedule(fe.get("energy", 100), it),
                          Schedule(fe.get("cumulative", 100), it))


def _weights(cfg, defaults):
    from .deform import LossWeights

    w = dict(vars(defaults))
    w.update(cfg.get("weights", {}))
    return LossWeights(**w)


def _retarget_job(cfg, seed):
    from .deform import LossWeights, RetargetJob

    alpha = float(cfg["alpha"])
    mode = cfg.get("mode") or ("shrink" if alpha <= 1 else "expand")
    lr = cfg.get("lr", 0.001 if mode == "shrink" else 0.0001)
    try:
        return RetargetJob(axis=cfg.get("axis", "x"), alpha=alpha, mode=mode,
                           weights=_weights(cfg, LossWeights()),
                           init_schedule=_schedule(cfg, "init_epochs", 50),
                           schedule=_schedule(cfg, "epochs", 50, lr), seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _read_image(path):
    from .raster import ImageError, RasterImage

    try:
        return RasterImage.read(path)
    except (OSError, ImageError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from None


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _loss_table(history):
    return [dict(epoch=e.epoch, total=e.total, **e.terms) for e in history]


# -- commands --------------------------------------------------------------------

def cmd_retarget(cfg, seed, out: Path, dry):
    from .metrics import energy_retention
    from .pipeline import loss_log_csv, retarget_image

    job = _retarget_job(cfg, seed)
    plan = {"command": "retarget", "job": _describe_job(job), "field_schedules": _describe(_field_schedules(cfg))}
    if dry:
        return plan
    image = _read_image(cfg["input"])
    t0 = time.perf_counter()
    res = retarget_image(image, job, schedules=_field_schedules(cfg))
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "output.png", res.image)
    write_png(out / "folds.png", res.fold)
    write_text(out / "loss.csv", loss_log_csv(res.log))
    report = {
        "command": "retarget", "parameters": plan["job"],
        "energy_retention": energy_retention(image, res.image),
        "boundary_residual": res.residuals["boundary"],
        "monotonicity_residual": res.residuals["monotonic"],
        "cap_residual": res.residuals.get("cap", 0.0),
        "init_residual": res.init_residual,
        "wall_time_seconds": time.perf_counter() - t0,
        "loss_table": _loss_table(res.log),
    }
    return report


def _describe(obj):
    from dataclasses import asdict, is_dataclass

    return _jsonable(asdict(obj)) if is_dataclass(obj) else obj


def _describe_job(job):
    d = _describe(job)
    d.pop("config", None)
    return d


def cmd_carve(cfg, seed, out: Path, dry):
    from .metrics import energy_retention, seam_overlay
    from .seams import carve, expand_seams, min_seam, select_seams

    if "debug_grid" in cfg:
        seam, cost = min_seam(np.array(cfg["debug_grid"], dtype=np.float64), cfg.get("orientation", "vertical"))
        print(json.dumps({"seam": seam.indices.tolist(), "cost": cost}))
        return None
    if "input" not in cfg:
        raise ConfigError("carve needs 'input' (or 'debug_grid')")
    orientation = cfg.get("orientation", "vertical")
    image = _read_image(cfg["input"])
    extent = image.width if orientation == "vertical" else image.height
    n = _seam_count(cfg, extent)
    expand = cfg.get("mode", "shrink") == "expand" or cfg.get("alpha", 1.0) > 1
    if n >= extent:
        raise ConfigError(f"n={n} seams is not below the extent {extent}")
    plan = {"command": "carve", "n": n, "orientation": orientation, "mode": "expand" if expand else "shrink"}
    if dry:
        return plan
    t0 = time.perf_counter()
    result = expand_seams(image, n, orientation) if expand else carve(image, n, orientation)
    seams = select_seams(image, n, orientation)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "output.png", result)
    write_png(out / "seams.png", seam_overlay(image, seams, orientation))
    return {"command": "carve", "parameters": plan, "energy_retention": energy_retention(image, result),
            "wall_time_seconds": time.perf_counter() - t0}


def _seam_count(cfg, extent):
    if "n" in cfg:
        return int(cfg["n"])
    if "alpha" in cfg:
        return abs(extent - int(round(float(cfg["alpha"]) * extent)))
    raise ConfigError("carve needs 'n' or 'alpha'")


def cmd_compare(cfg, seed, out: Path, dry):
    from .metrics import energy_retention, side_by_side
    from .pipeline import retarget_image
    from .seams import carve, expand_seams

    job = _retarget_job(cfg, seed)
    orientation = "vertical" if job.axis == "x" else "horizontal"
    plan = {"command": "compare", "job": _describe_job(job)}
    if dry:
        return plan
    image = _read_image(cfg["input"])
    extent = image.width if job.axis == "x" else image.height
    n = abs(extent - int(round(job.alpha * extent)))
    t0 = time.perf_counter()
    neural = retarget_image(image, job, schedules=_field_schedules(cfg))
    t1 = time.perf_counter()
    seam = expand_seams(image, n, orientation) if job.alpha > 1 else carve(image, n, orientation)
    t2 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "side-by-side.png", side_by_side([image, neural.image, seam]))
    return {
        "command": "compare", "parameters": plan["job"],
        "neural": {"energy_retention": energy_retention(image, neural.image), "wall_time_seconds": t1 - t0,
                   "boundary_residual": neural.residuals["boundary"],
                   "monotonicity_residual": neural.residuals["monotonic"]},
        "seam_carving": {"energy_retention": energy_retention(image, seam), "wall_time_seconds": t2 - t1},
        "wall_time_seconds": t2 - t0,
    }


def _edit_job(cfg, seed, mode):
    from .deform import LossWeights
    from .editing import EditJob
    from .raster import read_mask

    image = _read_image(cfg["input"])
    try:
        mask = read_mask(cfg["mask"])
    except OSError as exc:
        raise ConfigError(f"cannot read mask {cfg['mask']}: {exc}") from None
    try:
        return EditJob(image, mask, mode=mode, offset=(float(cfg.get("dx", 0.0)), float(cfg.get("dy", 0.0))),
                       axis=cfg.get("axis", "x"), weights=_weights(cfg, LossWeights()),
                       edit_weight=float(cfg.get("edit_weight", 10000.0)), sigma=float(cfg.get("sigma", 2.0)),
                       init_schedule=_schedule(cfg, "init_epochs", 50),
                       schedule=_schedule(cfg, "epochs", 50, cfg.get("lr")),
                       field_schedules=_field_schedules(cfg), seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _cmd_edit(cfg, seed, out, dry, mode):
    from .editing import move_object, remove_object

    job = _edit_job(cfg, seed, mode)
    plan = {"command": mode, "offset": list(job.offset), "axis": job.axis, "sigma": job.sigma,
            "edit_weight": job.edit_weight, "weights": _describe(job.weights),
            "schedule": _describe(job.schedule), "init_schedule": _describe(job.init_schedule)}
    if dry:
        return plan
    t0 = time.perf_counter()
    res = remove_object(job) if mode == "remove" else move_object(job)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "output.png", res.image)
    return {"command": mode, "parameters": plan, "edit_residual": res.residual,
            "wall_time_seconds": time.perf_counter() - t0,
            "loss_table": [_loss_table(h) for h in res.logs]}


def cmd_remove(cfg, seed, out, dry):
    return _cmd_edit(cfg, seed, out, dry, "remove")


def cmd_move(cfg, seed, out, dry):
    return _cmd_edit(cfg, seed, out, dry, "move")


def _job3d(cfg, seed):
    from .deform import LossWeights
    from .fields import Schedule
    from .pointset import WEIGHTS_3D, Retarget3DJob

    it = int(cfg.get("iters", 100))
    mix = float(cfg.get("mixture_ratio", 0.5))
    total = int(cfg.get("samples", 20000))
    return Retarget3DJob(
        alpha=float(cfg["alpha"]), axis={"x": 0, "y": 1, "z": 2}[cfg.get("axis", "x")],
        weights=_weights(cfg, WEIGHTS_3D) if "weights" in cfg else WEIGHTS_3D,
        eps=float(cfg.get("epsilon3d", 1.0 / 256)),
        init_iterations=int(cfg.get("init_iterations", 5000)),
        energy_schedule=Schedule(int(cfg.get("energy_epochs", 50)), it),
        cumulative_schedule=Schedule(int(cfg.get("cumulative_epochs", 100)), it),
        schedule=Schedule(int(cfg.get("epochs", 50)), it, float(cfg.get("lr", 0.001))),
        surface_samples=int(round(total * mix)), uniform_samples=total - int(round(total * mix)),
        boundary_samples=int(cfg.get("boundary_samples", 10000)),
        knn=int(cfg.get("knn", 5)), polish_iterations=int(cfg.get("polish_iterations", 0)), seed=seed)


def cmd_retarget3d(cfg, seed, out, dry):
    from .meshes import MeshError, PointFile, read_points, write_points
    from .pointset import PointSetScene, raw_energy, retarget_points

    job = _job3d(cfg, seed)
    try:
        pf = read_points(cfg["input"])
    except (OSError, MeshError, ValueError) as exc:
        raise ConfigError(f"cannot read points {cfg['input']}: {exc}") from None
    if pf.energy is not None and cfg.get("energy_mode") is None:
        energy = pf.energy
    elif cfg.get("energy_mode") == "color":
        if pf.colors is None:
            raise ConfigError("energy_mode 'color' needs per-point colours")
        energy = raw_energy(pf.points, pf.colors, job.axis)
    elif cfg.get("energy_mode") == "file":
        if pf.energy is None:
            raise ConfigError("energy_mode 'file' needs an energy column")
        energy = pf.energy
    else:
        raise ConfigError("points have no energy column; set energy_mode to 'color'")
    plan = {"command": "retarget3d", "job": _describe_job(job), "points": len(pf.points)}
    if dry:
        return plan
    scene = PointSetScene(pf.points, energy, job.axis, job.alpha, pf.colors)
    t0 = time.perf_counter()
    res = retarget_points(scene, job)
    out.mkdir(parents=True, exist_ok=True)
    suffix = ".csv" if str(cfg["input"]).lower().endswith(".csv") else ".ply"
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        p = Path(tmp) / f"output{suffix}"
        write_points(p, PointFile(res.points, pf.colors, energy))
        os.replace(p, out / f"output{suffix}")
    return _report3d("retarget3d", plan, res, t0)


def _report3d(name, plan, res, t0):
    r = res.result
    best = r.log[r.best_epoch] if r.log else None
    return {"command": name, "parameters": plan["job"], "best_epoch": r.best_epoch,
            "boundary_residual": best.terms.get("boundary", 0.0) if best else 0.0,
            "monotonicity_residual": best.terms.get("monotonic", 0.0) if best else 0.0,
            "inverse_rms": r.inverse_rms, "wall_time_seconds": time.perf_counter() - t0,
            "loss_table": _loss_table(r.log)}


def cmd_mesh(cfg, seed, out, dry):
    from .meshes import MeshError, TriMesh, mesh_energy, read_obj, surface_samples, write_obj
    from .pointset import PointSetScene, deform_points, retarget_points

    job = _job3d(cfg, seed)
    mode = cfg.get("energy_mode", "curvature")
    try:
        mesh = read_obj(cfg["input"])
        if mode == "label":
            if "labels" not in cfg:
                raise ConfigError("energy_mode 'label' needs a 'labels' file (one 0/1 per vertex, 1 = background)")
            labels = np.loadtxt(cfg["labels"], dtype=int).reshape(-1).astype(bool)
            mesh = TriMesh(mesh.vertices, mesh.faces, labels)
    except (OSError, MeshError, ValueError) as exc:
        raise ConfigError(f"cannot read mesh: {exc}") from None
    plan = {"command": "mesh", "job": _describe_job(job), "vertices": len(mesh.vertices),
            "energy_mode": mode}
    if dry:
        return plan
    t0 = time.perf_counter()
    e = mesh_energy(mesh, mode)
    sp, se = surface_samples(mesh, e, int(cfg.get("surface_points", 5000)), seed)
    pts = np.concatenate([mesh.vertices, sp])
    scene = PointSetScene(pts, np.concatenate([e, se]), job.axis, job.alpha)
    res = retarget_points(scene, job)
    moved = TriMesh(deform_points(mesh.vertices, res.result.U), mesh.faces)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        write_obj(Path(tmp) / "output.obj", moved)
        os.replace(Path(tmp) / "output.obj", out / "output.obj")
    return _report3d("mesh", plan, res, t0)


def cmd_fixtures(cfg, seed, out, dry):
    from . import fixtures as fx
    from .meshes import PointFile, room, sphere, write_obj, write_ply
    from .pointset import two_slabs
    from .raster import RasterImage

    names = ["stripe.png", "two_stripes.png", "natural.png", "constant.png", "corridors.png", "square.png",
             "square_mask.png", "stripe_mask.png", "two_slabs.ply", "room.obj", "room_labels.txt", "sphere.obj"]
    if dry:
        return {"command": "fixtures", "files": names}
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    size = int(cfg.get("size", 64))
    write_png(out / "stripe.png", fx.stripe(size, size, size // 4))
    write_png(out / "two_stripes.png", fx.two_stripes(size, size, size // 8))
    write_png(out / "natural.png", fx.natural(size, seed))
    write_png(out / "constant.png", fx.constant(size, size))
    write_png(out / "corridors.png", fx.corridors(seed=seed))
    square, mask = fx.square_scene()
    write_png(out / "square.png", square)
    write_png(out / "square_mask.png", RasterImage(np.where(mask, 255, 0).astype(np.uint8)))
    stripe = fx.stripe(size, size, size // 4)
    write_png(out / "stripe_mask.png", RasterImage(np.where(fx.stripe_mask(stripe), 255, 0).astype(np.uint8)))
    scene = two_slabs(int(cfg.get("points", 5000)), seed)
    write_ply(out / "two_slabs.ply", PointFile(scene.points, None, scene.energy))
    r = room()
    write_obj(out / "room.obj", r)
    write_text(out / "room_labels.txt", "\n".join(str(int(b)) for b in r.labels) + "\n")
    write_obj(out / "sphere.obj", sphere())
    return {"command": "fixtures", "files": names, "wall_time_seconds": time.perf_counter() - t0}


HANDLERS = {
    "retarget": cmd_retarget, "carve": cmd_carve, "compare": cmd_compare, "remove": cmd_remove,
    "move": cmd_move, "retarget3d": cmd_retarget3d, "mesh": cmd_mesh, "fixtures": cmd_fixtures,
}


# -- driver ----------------------------------------------------------------------

def run_one(command: str, config_path: str | None, overrides: dict, seed_flag, out_flag, dry: bool) -> int:
    from .nn import NumericError

    try:
        cfg = load_config(command, config_path, overrides)
        seed = int(seed_flag if seed_flag is not None else cfg.get("seed", 0))
        out = Path(out_flag or cfg.get("out_dir", "out"))
        logging.getLogger("neural_retarget").setLevel(cfg.get("log_level", "INFO"))
        report = HANDLERS[command](cfg, seed, out, dry)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error in {exc.term}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if report is None:
        return EXIT_OK
    report = _jsonable(report)
    if dry:
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    report.setdefault("seed", seed)
    jsonschema.validate(report, REPORT_SCHEMA)
    write_json(out / "report.json", report)  # last, so a partial run leaves no report
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neural-retarget", description="Content-aware retargeting with deformation fields.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", action="append", help="job JSON; repeat to run several jobs")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (per job subdirectories when several configs are given)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker threads across configs")
    p.add_argument("--dry-run", action="store_true", help="validate and print the resolved job; write nothing")
    p.add_argument("--input")
    p.add_argument("--mask")
    p.add_argument("--alpha", type=float)
    p.add_argument("--axis", choices=("x", "y", "z"))
    p.add_argument("--n", type=int)
    p.add_argument("--dx", type=float)
    p.add_argument("--dy", type=float)
    p.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", level=logging.WARNING)
    overrides = {"input": args.input, "mask": args.mask, "alpha": args.alpha, "axis": args.axis,
                 "n": args.n, "dx": args.dx, "dy": args.dy, "log_level": args.log_level}
    configs = args.config or [None]
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if len(configs) == 1:
        return run_one(args.command, configs[0], overrides, args.seed, args.out, args.dry_run)
    base = Path(args.out) if args.out else None

    def job(i_cfg):
        i, c = i_cfg
        return run_one(args.command, c, overrides, args.seed, str(base / f"job{i}") if base else None, args.dry_run)

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        codes = list(pool.map(job, enumerate(configs)))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
