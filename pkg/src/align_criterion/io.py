"""
JSON/CSV formats shared by the command line.

Scene file::

    {"classes": 5, "objects": [{"class": 2, "box": [cx, cy, w, h]}, ...]}

Predictions file (one inner list per decoder layer, last layer last)::

    {"layers": [[{"scores": [p_0, ..., p_C-1], "box": [cx, cy, w, h]}, ...], ...]}

Floats are written with 9 significant digits; NaN and infinities as null.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import jsonschema
import numpy as np

from .geometry import Box
from .structures import GroundTruth, PredictionSet, Scene

FLOAT_DIGITS = 9


class FormatError(ValueError):
    """Input file cannot be parsed or fails validation."""


def round_floats(obj):
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return float(f"{x:.{FLOAT_DIGITS}g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return round_floats(obj.tolist())
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(round_floats(obj), indent=2) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj))


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        x = float(v)
        return "" if not math.isfinite(x) else f"{x:.{FLOAT_DIGITS}g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_cell(v) for v in row])


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


_BOX = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["classes", "objects"],
    "properties": {
        "classes": {"type": "integer", "minimum": 1},
        "objects": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["class", "box"],
                "properties": {"class": {"type": "integer", "minimum": 0}, "box": _BOX},
            },
        },
    },
}

PREDICTIONS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["layers"],
    "properties": {
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["scores", "box"],
                    "properties": {
                        "scores": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                        "box": _BOX,
                    },
                },
            },
        }
    },
}


def _validate(data, schema, what):
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise FormatError(f"invalid {what} at '{path}': {exc.message}") from exc


def scene_from_dict(data) -> Scene:
    _validate(data, SCENE_SCHEMA, "scene")
    try:
        objects = tuple(GroundTruth(o["class"], Box.from_seq(o["box"])) for o in data["objects"])
        return Scene(data["classes"], objects)
    except ValueError as exc:
        raise FormatError(f"invalid scene: {exc}") from exc


def scene_to_dict(scene: Scene) -> dict:
    return {
        "classes": scene.n_classes,
        "objects": [{"class": o.class_id, "box": list(o.box.as_tuple())} for o in scene.objects],
    }


def predictions_from_dict(data, n_classes: int | None = None) -> list[PredictionSet]:
    _validate(data, PREDICTIONS_SCHEMA, "predictions")
    layers = []
    for li, layer in enumerate(data["layers"]):
        if not layer:
            raise FormatError(f"layer {li} has no predictions")
        widths = {len(q["scores"]) for q in layer}
        if len(widths) != 1 or (n_classes is not None and widths != {n_classes}):
            raise FormatError(f"layer {li}: every prediction needs {n_classes or 'the same number of'} scores")
        try:
            layers.append(PredictionSet([q["scores"] for q in layer], [q["box"] for q in layer]))
        except ValueError as exc:
            raise FormatError(f"layer {li}: {exc}") from exc
    return layers


def predictions_to_dict(layers) -> dict:
    return {
        "layers": [
            [{"scores": list(map(float, s)), "box": list(map(float, b))} for s, b in zip(p.scores, p.boxes)]
            for p in layers
        ]
    }


def load_scene(path) -> Scene:
    return scene_from_dict(read_json(path))


def load_predictions(path, n_classes: int | None = None) -> list[PredictionSet]:
    return predictions_from_dict(read_json(path), n_classes)


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}

CRITERION_PROPS = {
    "alpha": _NUM,
    "tau": _NUM,
    "k": {"type": "integer", "minimum": 1},
    "gamma": _NUM,
    "loss_class": _NUM,
    "loss_bbox": _NUM,
    "loss_giou": _NUM,
    "variant": {"type": "string"},
    "prime_weighting": {"type": "boolean"},
    "focal_alpha": _NUM,
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scene": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_scenes": {"type": "integer", "minimum": 1},
                "n_gt": {
                    "oneOf": [
                        {"type": "integer", "minimum": 1, "maximum": 8},
                        {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1, "maximum": 8}},
                    ]
                },
                "n_classes": {"type": "integer", "minimum": 1},
                "seed": _INT,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_queries": {"type": "integer", "minimum": 1},
                "n_layers": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 0},
                "lr_logits": _NUM,
                "lr_boxes": _NUM,
                "beta1": _NUM,
                "beta2": _NUM,
                "adam_eps": _NUM,
                "logit_init_mean": _NUM,
                "logit_init_std": _NUM,
                "box_init_std": _NUM,
                "seed": _INT,
            },
        },
        "criterion": {"type": "object", "additionalProperties": False, "properties": CRITERION_PROPS},
        "variants": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "criterion": {"type": "object", "additionalProperties": False, "properties": CRITERION_PROPS},
                },
            },
        },
        "output_dir": {"type": "string"},
    },
}


def validate_experiment(data) -> dict:
    _validate(data, EXPERIMENT_SCHEMA, "experiment config")
    names = [v["name"] for v in data.get("variants", [])]
    if len(names) != len(set(names)):
        raise FormatError("variant names must be unique")
    return data
