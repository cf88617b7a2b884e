"""JSON schemas for job configs and the report written by every command."""

from __future__ import annotations

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT0 = {"type": "integer", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}

GLOBAL = {
    "seed": {"type": "integer", "minimum": 0},
    "out_dir": {"type": "string"},
    "log_level": {"enum": ["DEBUG", "INFO", "WARNING", "ERROR"]},
}

WEIGHTS = {
    "type": "object",
    "properties": {k: {"type": "number", "minimum": 0} for k in ("energy", "shear", "boundary", "monotonic", "cap")},
    "additionalProperties": False,
}

TRAINING = {
    "epochs": _INT0,
    "init_epochs": _INT0,
    "iters": _INT1,
    "lr": _POS,
    "weights": WEIGHTS,
    "field_epochs": {
        "type": "object",
        "properties": {"image": _INT0, "energy": _INT0, "cumulative": _INT0},
        "additionalProperties": False,
    },
}

IMAGE_JOB = {
    "input": {"type": "string"},
    "alpha": _POS,
    "axis": {"enum": ["x", "y"]},
    "mode": {"enum": ["shrink", "expand"]},
}


def _schema(props: dict, required=()) -> dict:
    return {
        "type": "object",
        "properties": {**GLOBAL, **props},
        "required": list(required),
        "additionalProperties": False,
    }


_JOB3D = {
    "input": {"type": "string"},
    "alpha": _POS,
    "axis": {"enum": ["x", "y", "z"]},
    "epsilon3d": _POS,
    "init_iterations": _INT0,
    "energy_epochs": _INT0,
    "cumulative_epochs": _INT0,
    "samples": _INT1,
    "mixture_ratio": {"type": "number", "minimum": 0, "maximum": 1},
    "boundary_samples": _INT1,
    "knn": _INT1,
    "polish_iterations": _INT0,
    **{k: v for k, v in TRAINING.items() if k not in ("init_epochs", "field_epochs")},
}

COMMAND_SCHEMAS = {
    "retarget": _schema({**IMAGE_JOB, **TRAINING}, ["input", "alpha"]),
    "compare": _schema({**IMAGE_JOB, **TRAINING}, ["input", "alpha"]),
    "carve": _schema({
        "input": {"type": "string"},
        "n": _INT0,
        "alpha": _POS,
        "mode": {"enum": ["shrink", "expand"]},
        "orientation": {"enum": ["vertical", "horizontal"]},
        "debug_grid": {"type": "array", "minItems": 1,
                       "items": {"type": "array", "minItems": 1, "items": _NUM}},
    }),
    "remove": _schema({
        "input": {"type": "string"}, "mask": {"type": "string"}, "axis": {"enum": ["x", "y"]},
        "sigma": _POS, "edit_weight": _POS, **TRAINING,
    }, ["input", "mask"]),
    "move": _schema({
        "input": {"type": "string"}, "mask": {"type": "string"}, "axis": {"enum": ["x", "y"]},
        "dx": _NUM, "dy": _NUM, "sigma": _POS, "edit_weight": _POS, **TRAINING,
    }, ["input", "mask"]),
    "retarget3d": _schema({**_JOB3D, "energy_mode": {"enum": ["color", "file"]}}, ["input", "alpha"]),
    "mesh": _schema({**_JOB3D, "energy_mode": {"enum": ["curvature", "label"]}, "labels": {"type": "string"},
                     "surface_points": _INT0}, ["input", "alpha"]),
    "fixtures": _schema({"size": {"type": "integer", "minimum": 8}, "points": _INT1}),
}

_FINITE = {"type": "number"}
_RESIDUAL = {"type": "number", "minimum": 0}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricsReport",
    "type": "object",
    "required": ["command", "wall_time_seconds", "seed"],
    "properties": {
        "command": {"enum": list(COMMAND_SCHEMAS)},
        "seed": {"type": "integer"},
        "parameters": {"type": "object"},
        "energy_retention": _FINITE,
        "boundary_residual": _RESIDUAL,
        "monotonicity_residual": _RESIDUAL,
        "cap_residual": _RESIDUAL,
        "init_residual": _RESIDUAL,
        "inverse_rms": _RESIDUAL,
        "edit_residual": _RESIDUAL,
        "best_epoch": {"type": "integer"},
        "wall_time_seconds": {"type": "number", "minimum": 0},
        "loss_table": {"type": "array"},
        "files": {"type": "array", "items": {"type": "string"}},
        "neural": {"type": "object", "required": ["energy_retention", "wall_time_seconds"]},
        "seam_carving": {"type": "object", "required": ["energy_retention", "wall_time_seconds"]},
    },
}
