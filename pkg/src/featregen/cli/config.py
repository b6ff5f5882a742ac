"""Run configuration: a YAML (or JSON) document checked against a JSON schema."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

import jsonschema
import yaml

CONFIG_SCHEMA: dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "featregen run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "seed": {"type": "integer"},
                "heldout_size": {"type": ["integer", "null"], "minimum": 1},
                "train_limit": {"type": ["integer", "null"], "minimum": 1},
                "val_limit": {"type": ["integer", "null"], "minimum": 1},
                "root": {"type": ["string", "null"]},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "architecture_id": {"type": "string"},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "threat": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "norm_type": {"enum": ["inf", 2, "2"]},
                "xi": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "target_fooling_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "step_fraction": {"type": "number", "exclusiveMinimum": 0},
                "plateau_patience": {"type": "integer", "minimum": 1},
                "update": {"enum": [None, "sign", "normalized"]},
                "set_size": {"type": "integer", "minimum": 1},
                "test_set_size": {"type": "integer", "minimum": 1},
                "max_cosine": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_attempts": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "synthesis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 0},
                "eta": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
            },
        },
        "plan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_units": {"type": "integer", "minimum": 1, "maximum": 6},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "lr_drop": {"type": "number", "exclusiveMinimum": 0},
                "milestones": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1}},
                "momentum": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
                "clean_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "clip_grad_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "retrain_rounds": {"type": "integer", "minimum": 0},
                "retrain_per_round": {"type": "integer", "minimum": 1},
                "retrain_synthetic": {"type": "integer", "minimum": 0},
                "retrain_epochs": {"type": "integer", "minimum": 1},
                "retrain_milestones": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1}},
                "retrain_max_epochs": {"type": "integer", "minimum": 1},
                "retrain_target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "retrain_refresh": {"enum": ["round", "epoch"]},
                "retrain_fresh_weight": {"type": "integer", "minimum": 1},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scenarios": {"type": "array", "items": {"type": "string"}},
                "xi_multipliers": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "stronger_xi_target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "cross_model_arch": {"type": "string"},
                "whitebox_epochs": {"type": "integer", "minimum": 1},
                "whitebox_target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "family_b_step_fraction": {"type": "number", "exclusiveMinimum": 0},
                "family_b_patience": {"type": "integer", "minimum": 1},
                "mask_fractions": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "mask_layer": {"type": ["string", "null"]},
            },
        },
        "output_dir": {"type": "string"},
        "global_seed": {"type": "integer"},
    },
}

DEFAULTS: dict[str, Any] = {
    "dataset": {"name": "textures10", "seed": 0, "heldout_size": None, "train_limit": None,
                "val_limit": None, "root": None},
    "model": {"architecture_id": "mini-vgg", "epochs": 16, "lr": 0.05, "batch_size": 64},
    "threat": {"norm_type": "inf", "xi": None, "target_fooling_ratio": 0.8, "max_epochs": 20,
               "batch_size": 100, "step_fraction": 0.1, "plateau_patience": 5, "update": None,
               "set_size": 5, "test_set_size": 5, "max_cosine": 0.15, "max_attempts": None},
    "synthesis": {"count": 200, "eta": None, "max_iters": 10000},
    "plan": {"ratio": 0.5, "max_units": 6},
    "training": {"epochs": 10, "lr": 0.1, "lr_drop": 10.0, "milestones": [6, 9], "momentum": 0.9,
                 "weight_decay": 5e-4, "batch_size": 64, "clean_fraction": 0.5, "clip_grad_norm": 1.0,
                 "retrain_rounds": 1, "retrain_per_round": 5, "retrain_synthetic": 200,
                 "retrain_epochs": 6, "retrain_milestones": [3, 5], "retrain_max_epochs": 5,
                 "retrain_target": 0.8, "retrain_refresh": "epoch", "retrain_fresh_weight": 4},
    "evaluation": {"scenarios": ["same_norm", "cross_norm", "stronger_xi", "cross_model", "heldout_attack",
                                 "whitebox_secondary"],
                   "xi_multipliers": [1.0, 1.5, 2.0, 2.5], "stronger_xi_target": 0.99, "cross_model_arch": "mini-alex",
                   "whitebox_epochs": 10, "whitebox_target": 0.99, "family_b_step_fraction": 0.05,
                   "family_b_patience": 3, "mask_fractions": [i / 10 for i in range(11)], "mask_layer": None},
    "output_dir": "runs/default",
    "global_seed": 0,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


class RunConfig:
    """Validated, fully-populated configuration; ``snapshot()`` is what artifacts embed."""

    def __init__(self, doc: dict | None = None):
        doc = doc or {}
        validate(doc)
        self.data = _merge(DEFAULTS, doc)
        validate(self.data)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["global_seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    def override(self, dotted: str, value) -> "RunConfig":
        parts = dotted.split(".")
        patch: dict = {}
        cur = patch
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        return RunConfig(_merge(self.data, patch))

    def snapshot(self) -> dict:
        return copy.deepcopy(self.data)

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        try:
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls(doc)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.data, sort_keys=True))
