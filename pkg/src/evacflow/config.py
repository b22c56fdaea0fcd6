"""Experiment configuration: one JSON file, validated against a schema with line-precise errors."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .models import ADJACENCY_MODES
from .synthetic import ScenarioConfig

INPUT_KEYS = (
    "graph",
    "detectors_regular",
    "detectors_evacuation",
    "movement_evacuation",
    "movement_regular",
    "tile_map",
    "centroids",
    "evacuation_features",
)


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; the message carries file:line."""


_ratios = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3}
_training = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 1},
        "time_budget_s": {"type": ["number", "null"], "exclusiveMinimum": 0},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "runs": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "inputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "string"} for k in INPUT_KEYS},
        },
        "scenario": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "corridors": {"type": "integer", "minimum": 1},
                "nodes_per_corridor": {"type": "integer", "minimum": 1},
                "spacing_miles": {"type": "number", "exclusiveMinimum": 0},
                "regular_days": {"type": "integer", "minimum": 2},
                "regular_start": {"type": "string"},
                "base_flow": {"type": "number"},
                "am_peak": {"type": "number", "minimum": 0},
                "pm_peak": {"type": "number", "minimum": 0},
                "weekend_peak_factor": {"type": "number", "minimum": 0},
                "noise_std": {"type": "number", "minimum": 0},
                "daylight_amplitude": {"type": "number", "minimum": 0, "maximum": 1},
                "detector_spread": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "free_flow_speed": {"type": "number"},
                "capacity_per_lane": {"type": "number"},
                "landfall": {"type": "string"},
                "evac_days": {"type": "integer", "minimum": 1},
                "lead_days": {"type": "integer", "minimum": 0},
                "surge_magnitude": {"type": "number"},
                "surge_variation": {"type": "number", "minimum": 0},
                "affected_corridors": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "ramp_hours": {"type": "number", "exclusiveMinimum": 0},
                "order_hours": {"type": "array", "items": {"type": "number"}},
                "order_population": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "movement_coupling": {"type": "number", "minimum": 0},
                "movement_background": {"type": "number", "minimum": 0},
                "movement_noise": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden_size": {"type": "integer", "minimum": 1},
                "input_length": {"type": "integer", "minimum": 1},
                "horizon": {"type": "integer", "minimum": 1},
                "adjacency_mode": {"enum": list(ADJACENCY_MODES)},
                "adjacency_norm": {"enum": ["affinity", "raw"]},
                "symmetric": {"type": "boolean"},
            },
        },
        "transfer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden_size": {"type": "integer", "minimum": 1},
                "use_movement": {"type": "boolean"},
            },
        },
        "training": _training,
        "transfer_training": _training,
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"regular": _ratios, "evacuation": _ratios},
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "runs": 1,
    "workers": 1,
    "output_dir": "runs/default",
    "inputs": {},
    "scenario": {},
    "model": {
        "hidden_size": 32,
        "input_length": 6,
        "horizon": 6,
        "adjacency_mode": "dynamic",
        "adjacency_norm": "affinity",
        "symmetric": False,
    },
    "transfer": {"hidden_size": 32, "use_movement": True},
    "training": {"lr": 0.003, "batch_size": 32, "max_epochs": 100, "patience": 10, "time_budget_s": None},
    "transfer_training": {"lr": 0.003, "batch_size": 32, "max_epochs": 100, "patience": 15, "time_budget_s": None},
    "split": {"regular": [0.9, 0.05, 0.05], "evacuation": [0.8, 0.1, 0.1]},
}


def _line_of(text: str, path) -> int:
    """Best-effort line number of the JSON value at ``path`` (keys searched in order)."""
    pos = 0
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"' + re.escape(str(key)) + r'"\s*:').search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    data: dict
    source: str = "<defaults>"
    base_dir: Path = Path(".")

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def runs(self) -> int:
        return self.data["runs"]

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.data["output_dir"])

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def scenario(self) -> ScenarioConfig:
        sc = ScenarioConfig.from_dict(self.data["scenario"])
        sc.validate()
        return sc

    def input_path(self, key: str) -> Path:
        """Explicit input path if configured, otherwise the synthetic data directory."""
        explicit = self.data["inputs"].get(key)
        if explicit:
            return self.resolve(explicit)
        return self.output_dir / "data" / f"{key}.csv"

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, seed=None, out=None, runs=None) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["seed"] = int(seed)
        if out is not None:
            data["output_dir"] = str(Path(out).resolve())
        if runs is not None:
            if int(runs) < 1:
                raise ConfigError("--runs must be >= 1")
            data["runs"] = int(runs)
        return ExperimentConfig(data, self.source, self.base_dir)


def parse_config(text: str, source: str = "<string>", base_dir=".") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{source}:{err.lineno}:{err.colno}: invalid JSON: {err.msg}") from None
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(map(str, e.absolute_path)) or "<root>"
            lines.append(f"{source}:{_line_of(text, list(e.absolute_path))}: {where}: {e.message}")
        raise ConfigError("\n".join(lines))
    data = _merge(DEFAULTS, raw)
    for name, ratios in data["split"].items():
        if abs(sum(ratios) - 1.0) > 1e-9:
            line = _line_of(text, ["split", name])
            raise ConfigError(f"{source}:{line}: split/{name}: ratios sum to {sum(ratios):.6g}, expected 1")
    cfg = ExperimentConfig(data, source, Path(base_dir))
    try:
        cfg.scenario()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{source}:{_line_of(text, ['scenario'])}: scenario: {err}") from None
    for key, p in data["inputs"].items():
        if not cfg.resolve(p).exists():
            raise ConfigError(f"{source}:{_line_of(text, ['inputs', key])}: inputs/{key}: file not found: {p}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path), path.resolve().parent)


def default_config() -> ExperimentConfig:
    return ExperimentConfig(copy.deepcopy(DEFAULTS))
