"""Run configuration: JSON schema, loading and validation."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Mapping

import jsonschema

LEARNER = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["linear", "mlp", "knn", "forest", "constant"]},
        "name": {"type": "string"},
        "options": {"type": "object"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

FRACTION = {"oneOf": [{"enum": [0, 0.0, 0.1, 0.2]}, {"const": "0.8-train-all"}]}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "shiftadapt run configuration",
    "type": "object",
    "properties": {
        "task": {
            "type": "object",
            "properties": {"kind": {"enum": ["classification", "regression"]}, "label": {"type": "string"}},
            "required": ["kind", "label"],
            "additionalProperties": False,
        },
        "data": {
            "type": "object",
            "properties": {"csv": {"type": "string"}, "schema": {"type": "string"}},
            "required": ["csv", "schema"],
            "additionalProperties": False,
        },
        "groups": {
            "type": "object",
            "properties": {"attribute": {"type": "string"}, "source": {"type": "string"},
                           "target": {"type": "string"}},
            "required": ["attribute", "source", "target"],
            "additionalProperties": False,
        },
        "model": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["linear", "mlp", "knn", "forest", "constant", "ensemble"]},
                "name": {"type": "string"},
                "options": {"type": "object"},
                "zoo": {"type": "array", "items": LEARNER, "minItems": 1},
                "k": {"type": "integer", "minimum": 2},
                "repeats": {"type": "integer", "minimum": 1},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "evaluation": {
            "type": "object",
            "properties": {
                "fractions": {"type": "array", "items": FRACTION, "minItems": 1},
                "outer_folds": {"type": "integer", "minimum": 2},
                "inner_folds": {"type": "integer", "minimum": 2},
                "alpha_policy": {"enum": ["fixed", "grid", "theory"]},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "strict_paper_splits": {"type": "boolean"},
                "search": {"type": "object", "additionalProperties": {"type": "array"}},
                "fairness_attribute": {"type": "string"},
                "threshold": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "mmd": {
            "type": "object",
            "properties": {
                "attributes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "permutations": {"type": "integer", "minimum": 99},
                "features": {"enum": ["learned", "preprocessed"]},
                "epochs": {"type": "integer", "minimum": 1},
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3,
                           "maxItems": 3},
                "max_per_group": {"type": "integer", "minimum": 2},
                "repeats": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
            "required": ["attributes"],
            "additionalProperties": False,
        },
        "secondary": {
            "type": "object",
            "properties": {
                "csv": {"type": "string"},
                "schema": {"type": "string"},
                "label_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "folds": {"type": "integer", "minimum": 2},
                "priors": {"oneOf": [{"enum": ["empirical", "uniform"]},
                                     {"type": "array", "items": {"type": "number"}, "minItems": 2,
                                      "maxItems": 2}]},
                "primary_fraction": {"enum": [0, 0.0, 0.1, 0.2]},
                "bar_covariates": {"type": "array", "items": {"type": "string"}},
                "expected_signs": {"type": "object", "additionalProperties": {"enum": [-1, 1]}},
            },
            "required": ["csv", "schema"],
            "additionalProperties": False,
        },
        "bounds": {
            "type": "object",
            "properties": {
                "vc_dimension": {"type": "number", "minimum": 0},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "m": {"type": "integer", "minimum": 0},
                "n": {"type": "integer", "minimum": 0},
                "divergence": {"type": "number", "minimum": 0},
                "lam": {"type": "number", "minimum": 0},
                "constant_c": {"type": "number", "exclusiveMinimum": 0},
                "target_opt_risk": {"type": "number"},
            },
            "required": ["vc_dimension", "delta", "m", "n"],
            "additionalProperties": False,
        },
        "synth": {
            "type": "object",
            "properties": {
                "preset": {"enum": ["shift_pair", "mci"]},
                "params": {"type": "object"},
            },
            "required": ["preset"],
            "additionalProperties": False,
        },
        "output_dir": {"type": "string"},
        "jobs": {"type": "integer", "minimum": 1},
    },
    "required": ["task", "data", "output_dir"],
    "additionalProperties": False,
}

NEEDS = {
    "preprocess": (),
    "mmd": ("mmd",),
    "train": ("groups", "model"),
    "adapt": ("groups", "model"),
    "evaluate": ("groups", "model"),
    "secondary": ("groups", "model", "secondary"),
    "bounds": ("bounds",),
    "synth": ("synth",),
    "report": (),
}


class ConfigError(ValueError):
    pass


def validate(cfg: Mapping, command: str | None = None) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    for block in NEEDS.get(command, ()):
        if block not in cfg:
            raise ConfigError(f"command {command!r} needs a {block!r} block")
    model = cfg.get("model")
    if model and model["kind"] == "ensemble" and "zoo" not in model:
        raise ConfigError("model: an ensemble needs a 'zoo'")


def load(path: str | Path, command: str | None = None) -> tuple[dict, Path]:
    """Read, apply environment overrides, validate; returns the config and its directory."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return prepare(cfg, command), path.resolve().parent


def prepare(cfg: Mapping, command: str | None = None) -> dict:
    cfg = copy.deepcopy(dict(cfg))
    if os.environ.get("SHIFTADAPT_OUTPUT_DIR"):
        cfg["output_dir"] = os.environ["SHIFTADAPT_OUTPUT_DIR"]
    validate(cfg, command)
    return cfg
