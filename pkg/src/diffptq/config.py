"""Experiment configuration.

A config is a YAML document with one mapping per section. Every field is
required and unknown keys are rejected, so a config file fully determines
a run. ``diffptq init-config`` writes the defaults below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    modes: int = 4
    radius: float = 4.0
    std: float = 0.3
    heldout_rotation: float = math.pi / 4
    n_train: int = 8192
    seed: int = 0


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.25


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 2e-3
    rho: float = 0.99
    hidden: int = 64
    time_dim: int = 16
    cond_dim: int = 8
    log_every: int = 50
    seed: int = 1


@dataclass(frozen=True)
class QuantConfig:
    weight_bits: int | None = 8
    act_bits: int | None = 8
    calib_method: str = "mse"
    method: str = "progressive"
    grid_points: int = 80
    greedy_rounding: bool = False
    conditions: int = 32
    samples_per_condition: int = 4
    seed: int = 2


@dataclass(frozen=True)
class RelaxConfig:
    tau: float = 0.2
    end: str = "near_x0"
    high_bits: int = 10
    sweep_taus: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2])


@dataclass(frozen=True)
class EvalConfig:
    samples: int = 2048
    seeds: list = field(default_factory=lambda: [3])
    sigma_mode: str = "zero"
    features: str = "raw"


@dataclass(frozen=True)
class ProbeConfig:
    interval: list = field(default_factory=lambda: [1, 5])
    noise_std: float | None = None
    n_seeds: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    relax: RelaxConfig = field(default_factory=RelaxConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """SHA-256 (first 16 hex digits) of the canonical config, excluding ``out``."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """``cfg.replace(quant={"act_bits": 4})`` -- shallow per-section override."""
        updates = {}
        for name, value in sections.items():
            current = getattr(self, name)
            updates[name] = dataclasses.replace(current, **value) if isinstance(value, dict) else value
        cfg = dataclasses.replace(self, **updates)
        validate(cfg)
        return cfg


_CHOICES = {
    "quant.calib_method": ("mse", "minmax"),
    "quant.method": ("progressive", "fp_trajectory"),
    "relax.end": ("near_x0", "near_xT"),
    "eval.sigma_mode": ("zero", "standard"),
    "eval.features": ("raw", "rff"),
}


def _convert(path: str, annotation: str, value):
    def bad(expected):
        return ConfigError(f"field '{path}': expected {expected}, got {value!r}")

    optional = annotation.endswith("| None")
    base = annotation.replace("| None", "").strip()
    if value is None:
        if optional:
            return None
        raise bad(base)
    if base == "bool":
        if not isinstance(value, bool):
            raise bad("a boolean")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if base == "list":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                   for v in value):
            raise bad("a list of numbers")
        return list(value)
    raise AssertionError(f"unhandled annotation {annotation}")


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{prefix or 'root'}' must be a mapping")
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown field '{prefix}{key}'")
    for f in dataclasses.fields(cls):
        path = prefix + f.name
        if f.name not in data:
            raise ConfigError(f"missing required field '{path}'")
        value = data[f.name]
        sub = _SECTIONS.get(f.name) if not prefix else None
        kwargs[f.name] = _build(sub, value, path + ".") if sub else _convert(path, f.type, value)
    return cls(**kwargs)


_SECTIONS = {"dataset": DatasetConfig, "schedule": ScheduleConfig, "training": TrainingConfig,
             "quant": QuantConfig, "relax": RelaxConfig, "eval": EvalConfig, "probe": ProbeConfig}


def validate(cfg: ExperimentConfig) -> None:
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"field 'version': unsupported config version {cfg.version}")
    for path, choices in _CHOICES.items():
        section, name = path.split(".")
        value = getattr(getattr(cfg, section), name)
        if value not in choices:
            raise ConfigError(f"field '{path}': must be one of {choices}, got {value!r}")
    checks = [
        ("schedule.T", cfg.schedule.T >= 1),
        ("schedule.beta_start", 0 < cfg.schedule.beta_start <= cfg.schedule.beta_end < 1),
        ("dataset.modes", cfg.dataset.modes >= 1),
        ("dataset.n_train", cfg.dataset.n_train >= 1),
        ("training.steps", cfg.training.steps >= 1),
        ("quant.conditions", cfg.quant.conditions >= 1),
        ("quant.samples_per_condition", cfg.quant.samples_per_condition >= 1),
        ("quant.weight_bits", cfg.quant.weight_bits is None or 2 <= cfg.quant.weight_bits <= 16),
        ("quant.act_bits", cfg.quant.act_bits is None or 2 <= cfg.quant.act_bits <= 16),
        ("relax.tau", 0 <= cfg.relax.tau <= 1),
        ("relax.high_bits", 2 <= cfg.relax.high_bits <= 16),
        ("relax.sweep_taus", all(0 <= t <= 1 for t in cfg.relax.sweep_taus)),
        ("eval.samples", cfg.eval.samples >= 2),
        ("eval.seeds", len(cfg.eval.seeds) >= 1 and all(float(s).is_integer() for s in cfg.eval.seeds)),
        ("probe.interval", len(cfg.probe.interval) == 2),
        ("probe.n_seeds", cfg.probe.n_seeds >= 1),
    ]
    for path, ok in checks:
        if not ok:
            raise ConfigError(f"field '{path}': value out of range")


def from_dict(data) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: invalid YAML{where}: {getattr(exc, 'problem', exc)}") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
