"""Experiment configuration: nested JSON with defaults and dotted overrides.

A config file only needs the keys it changes; everything else comes from
:data:`DEFAULTS`.  Overrides such as ``finetune.steps=50`` or
``injection.targets=["value"]`` are applied after loading; the value is
parsed as JSON when possible and kept as a string otherwise.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .calibration import DEFAULT_THRESHOLDS, parse_method
from .data import TaskConfig
from .errors import ConfigurationError
from .model import ToyTransformerConfig
from .outlier import OutlierLossConfig
from .trainer import OptimizerConfig, TrainConfig

__all__ = [
    "DEFAULTS",
    "load_config",
    "apply_overrides",
    "merge",
    "bundled_config",
    "load_schema",
    "task_config",
    "model_config",
    "train_config",
    "outlier_objective",
    "methods",
]

DEFAULTS = {
    "seeds": [0, 1, 2, 3, 4],
    "data": {"n_samples": 10000, "signal": 1.25},
    "model": {"depth": 3, "dim": 32, "heads": 4},
    "baseline": {"steps": 800, "batch_size": 32, "learning_rate": 3e-3, "optimizer": {"kind": "adam"}},
    "injection": {"magnitude": 20.0, "fraction": 0.05, "targets": ["value"]},
    "finetune": {"steps": 300, "batch_size": 64, "learning_rate": 3e-3, "optimizer": {"kind": "adam"}},
    "outlier_loss": {"alpha": 0.5, "schedule": "linear", "sites": "all"},
    "calibration": {
        "batches": 10,
        "batch_size": 100,
        "methods": ["minmax", "ema", "percentile", "omse"],
        "p": 0.9999,
        "ema_decay": 0.9,
        "grid_points": 128,
    },
    "bits": [8, 7, 6],
    "sweep": {"bits": 7, "thresholds": list(DEFAULT_THRESHOLDS)},
    "analysis": {"threshold": 0.999, "bits": 8, "samples": 1000},
}


def load_schema(name: str) -> dict:
    return json.loads(resources.files("qtlab").joinpath("schemas", name).read_text())


def merge(base: dict, update: dict) -> dict:
    """Recursive dict merge; ``update`` wins, lists are replaced whole."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    out = copy.deepcopy(config)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return out


def bundled_config(name: str) -> Path:
    """Path of a demo config shipped with the package (``demo``, ``quick``)."""
    stem = name[:-5] if name.endswith(".json") else name
    path = resources.files("qtlab").joinpath("configs", f"{stem}.json")
    if not path.is_file():
        raise ConfigurationError(f"no bundled config named {name!r}")
    return Path(str(path))


def load_config(path=None, overrides=()) -> dict:
    """Defaults, merged with the file at ``path`` (if any), then overrides; validated."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            p = bundled_config(str(path))
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigurationError(f"{p}: top level must be an object")
        config = merge(config, user)
    config = apply_overrides(config, overrides)
    try:
        jsonschema.validate(config, load_schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config error at {where}: {exc.message}") from None
    # constructing the typed pieces catches cross-field errors early
    task_config(config, config["seeds"][0])
    model_config(config, config["seeds"][0])
    methods(config)
    return config


def task_config(config: dict, seed: int) -> TaskConfig:
    return TaskConfig.from_json({**config["data"], "seed": seed})


def model_config(config: dict, seed: int) -> ToyTransformerConfig:
    return ToyTransformerConfig.from_json({**config["model"], "seed": seed})


def train_config(section: dict, seed: int, outlier: OutlierLossConfig | None = None) -> TrainConfig:
    opt = dict(section.get("optimizer", {}))
    return TrainConfig(
        steps=int(section["steps"]),
        batch_size=int(section["batch_size"]),
        learning_rate=float(section["learning_rate"]),
        optimizer=OptimizerConfig(**opt),
        outlier=outlier or OutlierLossConfig(0.0, "constant"),
        seed=seed,
    )


def outlier_objective(config: dict) -> OutlierLossConfig:
    q = config["outlier_loss"]
    return OutlierLossConfig(
        alpha=float(q["alpha"]),
        schedule=q["schedule"],
        total_steps=max(1, int(config["finetune"]["steps"])),
        sites=q.get("sites", "all"),
    )


def methods(config: dict) -> list:
    cal = config["calibration"]
    return [parse_method(m, p=cal["p"], decay=cal["ema_decay"], grid_points=cal["grid_points"]) for m in cal["methods"]]
