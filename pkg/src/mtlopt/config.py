"""Experiment configuration: documented defaults, strict validation.

A config is a plain JSON object; every field has a default, so ``{}`` is a
runnable experiment. Validation happens before any training step and
reports the offending field path.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from .errors import ConfigError
from .network import ModelSpec
from .optimizers import METHOD_GD, METHOD_OURS, METHOD_PCGRAD, PHASE1, PHASE2
from .synthetic import SyntheticConfig

METHODS = (METHOD_OURS, METHOD_GD, METHOD_PCGRAD)
SCHEMES = ("equal", "manual", "uncertainty", "dwa")


def default_model_dict() -> dict:
    """The two-task desk benchmark: small shared trunk, one head per task."""
    return {
        "trunk": [
            {"in_channels": 3, "out_channels": 4, "kernel_size": 3},
            {"in_channels": 4, "out_channels": 4, "kernel_size": 3},
        ],
        "heads": {
            "1": [{"in_channels": 4, "out_channels": 6, "kernel_size": 1},
                  {"in_channels": 6, "out_channels": 4, "kernel_size": 1}],
            "2": [{"in_channels": 4, "out_channels": 6, "kernel_size": 1},
                  {"in_channels": 6, "out_channels": 1, "kernel_size": 1}],
        },
        "tasks": [
            {"id": 1, "loss": "cross_entropy", "weight": 1.0},
            {"id": 2, "loss": "mse", "weight": 1.0},
        ],
    }


def default_config_dict() -> dict:
    return {
        "method": "ours",
        "loss_scaling": {
            "scheme": "equal",
            "manual_ratios": None,
            "dwa_temperature": 2.0,
        },
        "epochs": 30,
        "steps_per_epoch": 10,
        "lr": 0.1,
        "update_rule": {"kind": "sgd", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "task_order": None,
        "phase_override": None,
        "seeds": [1],
        "out_dir": "runs/experiment",
        "eval_batches": 4,
        "save_checkpoints": False,
        "baselines": None,
        "data": {
            "batch_size": 8,
            "channels": 3,
            "height": 12,
            "width": 12,
            "num_classes": 4,
            "bumps": 3,
            "noise": 0.05,
            "depth_mix": [0.7, -0.7],
        },
        "model": default_model_dict(),
    }


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"config.{where}: unknown field")
        if isinstance(base[key], dict) and key != "model":
            if not isinstance(value, Mapping):
                raise ConfigError(f"config.{where}: expected an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"config.{path}: {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; see default_config_dict for keys."""

    raw: dict = field(repr=False)
    model: ModelSpec = field(repr=False)
    data: SyntheticConfig = field(repr=False)

    @property
    def method(self) -> str:
        return self.raw["method"]

    @property
    def scheme(self) -> str:
        return self.raw["loss_scaling"]["scheme"]

    @property
    def manual_ratios(self):
        return self.raw["loss_scaling"]["manual_ratios"]

    @property
    def dwa_temperature(self) -> float:
        return self.raw["loss_scaling"]["dwa_temperature"]

    @property
    def epochs(self) -> int:
        return self.raw["epochs"]

    @property
    def steps_per_epoch(self) -> int:
        return self.raw["steps_per_epoch"]

    @property
    def lr(self) -> float:
        return self.raw["lr"]

    @property
    def update_rule(self) -> dict:
        return self.raw["update_rule"]

    @property
    def task_order(self):
        return tuple(self.raw["task_order"]) if self.raw["task_order"] else ()

    @property
    def phase_override(self):
        return self.raw["phase_override"]

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.raw["seeds"])

    @property
    def out_dir(self) -> str:
        return self.raw["out_dir"]

    @property
    def eval_batches(self) -> int:
        return self.raw["eval_batches"]

    @property
    def save_checkpoints(self) -> bool:
        return self.raw["save_checkpoints"]

    @property
    def baselines_path(self):
        return self.raw["baselines"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    @classmethod
    def from_dict(cls, overrides: Mapping | None = None) -> "ExperimentConfig":
        raw = _merge(default_config_dict(), overrides or {})
        _require(raw["method"] in METHODS, "method", f"must be one of {METHODS}")
        ls = raw["loss_scaling"]
        _require(ls["scheme"] in SCHEMES, "loss_scaling.scheme", f"must be one of {SCHEMES}")
        _require(isinstance(raw["epochs"], int) and raw["epochs"] >= 1,
                 "epochs", "must be a positive integer")
        _require(isinstance(raw["steps_per_epoch"], int) and raw["steps_per_epoch"] >= 1,
                 "steps_per_epoch", "must be a positive integer")
        _require(isinstance(raw["lr"], (int, float)) and raw["lr"] > 0,
                 "lr", "must be a positive number")
        _require(raw["update_rule"]["kind"] in ("sgd", "adam"),
                 "update_rule.kind", "must be 'sgd' or 'adam'")
        _require(raw["phase_override"] in (None, PHASE1, PHASE2),
                 "phase_override", f"must be null, '{PHASE1}' or '{PHASE2}'")
        _require(isinstance(raw["seeds"], (list, tuple)) and len(raw["seeds"]) >= 1
                 and all(isinstance(s, int) for s in raw["seeds"]),
                 "seeds", "must be a nonempty list of integers")
        _require(isinstance(raw["eval_batches"], int) and raw["eval_batches"] >= 1,
                 "eval_batches", "must be a positive integer")
        _require(isinstance(raw["save_checkpoints"], bool),
                 "save_checkpoints", "must be a boolean")
        _require(raw["baselines"] is None or isinstance(raw["baselines"], str),
                 "baselines", "must be null or a path string")

        try:
            model = ModelSpec.from_dict(raw["model"])
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"config.model: {exc}") from exc
        k = model.num_tasks

        if ls["scheme"] == "manual":
            ratios = ls["manual_ratios"]
            _require(isinstance(ratios, (list, tuple)) and len(ratios) == k,
                     "loss_scaling.manual_ratios", f"manual scheme needs {k} ratios")
            _require(all(isinstance(r, (int, float)) and r >= 0 for r in ratios),
                     "loss_scaling.manual_ratios", "ratios must be nonnegative numbers")
        _require(isinstance(ls["dwa_temperature"], (int, float)) and ls["dwa_temperature"] > 0,
                 "loss_scaling.dwa_temperature", "must be positive")

        if raw["task_order"] is not None:
            _require(sorted(raw["task_order"]) == sorted(model.task_ids),
                     "task_order", f"must be a permutation of {model.task_ids}")

        try:
            data_kwargs = dict(raw["data"])
            data_kwargs["depth_mix"] = tuple(data_kwargs["depth_mix"])
            data = SyntheticConfig(**data_kwargs)
            data.validate()
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"config.data: {exc}") from exc
        _require(data.channels == model.trunk[0].in_channels if model.trunk else True,
                 "data.channels", "must match the first trunk layer's input channels")

        return cls(raw=raw, model=model, data=data)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                overrides = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
        return cls.from_dict(overrides)


def apply_dotted_overrides(overrides: dict, assignments: list[str]) -> dict:
    """Apply ``--set path.to.key=value`` assignments; values parse as JSON
    first and fall back to strings."""
    out = copy.deepcopy(overrides)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, _, raw_value = item.partition("=")
        try:
            value: Any = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not an object")
        node[parts[-1]] = value
    return out
