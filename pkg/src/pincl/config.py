"""Experiment configuration: JSON file with per-subcommand sections, every
field defaulted, validated with field-level messages."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .continual import CLConfig, ReplayPlan
from .data import DEFAULT_SCHEDULE
from .losses import LossConfig
from .model import TransolverConfig


class ConfigError(Exception):
    pass


@dataclass
class DatasetSection:
    schedule: list = field(default_factory=lambda: [list(p) for p in DEFAULT_SCHEDULE])
    samples_per_group: int = 30
    nx: int = 32
    length_scale: float = 0.1
    seed: int = 0
    eval_fraction: float = 0.25


@dataclass
class ModelSection:
    layers: int = 2
    slices: int = 8
    channels: int = 32
    heads: int = 4
    seed: int = 0


@dataclass
class LossSection:
    form: str = "energy"
    boundary_mode: str = "hard_mask"
    penalty_weight: float = 1.0
    hybrid_lambda: float = 0.3


@dataclass
class StrategySection:
    name: str = "replay"
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 8
    lambda_distill: float = 0.3
    score_kind: str = "strong"
    lora: bool = False
    lora_rank: int = 8
    lora_alpha: float = 16.0
    past_fraction: float = 0.10
    past_worst_fraction: float = 0.08
    past_random_fraction: float = 0.02
    new_fraction: float = 0.80
    new_worst_fraction: float = 0.64
    new_random_fraction: float = 0.16
    train_groups: list = field(default_factory=lambda: [0])
    checkpoint: str = ""
    sft_decile: float = 0.10


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    out: str = "runs"

    def model_config(self) -> TransolverConfig:
        m = self.model
        return TransolverConfig(layers=m.layers, slices=m.slices,
                                channels=m.channels, heads=m.heads)

    def loss_config(self) -> LossConfig:
        l = self.loss
        return LossConfig(form=l.form, boundary_mode=l.boundary_mode,
                          penalty_weight=l.penalty_weight,
                          hybrid_lambda=l.hybrid_lambda)

    def replay_plan(self) -> ReplayPlan:
        s = self.strategy
        return ReplayPlan(past_fraction=s.past_fraction,
                          past_worst_fraction=s.past_worst_fraction,
                          past_random_fraction=s.past_random_fraction,
                          new_fraction=s.new_fraction,
                          new_worst_fraction=s.new_worst_fraction,
                          new_random_fraction=s.new_random_fraction)

    def cl_config(self) -> CLConfig:
        s = self.strategy
        return CLConfig(loss=self.loss_config(), lambda_distill=s.lambda_distill,
                        epochs=s.epochs, lr=s.lr, batch_size=s.batch_size,
                        score_kind=s.score_kind, lora=s.lora,
                        lora_rank=s.lora_rank, lora_alpha=s.lora_alpha,
                        plan=self.replay_plan())

    def to_dict(self) -> dict:
        return {"dataset": vars(self.dataset), "model": vars(self.model),
                "loss": vars(self.loss), "strategy": vars(self.strategy),
                "out": self.out}


_SECTIONS = {"dataset": DatasetSection, "model": ModelSection,
             "loss": LossSection, "strategy": StrategySection}


def _build_section(name: str, cls, data: dict):
    section = cls()
    for key, value in data.items():
        if not hasattr(section, key):
            raise ConfigError(f"{name}.{key}: unknown field")
        default = getattr(section, key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected a boolean, got {value!r}")
        elif isinstance(default, int) and not isinstance(value, bool):
            if not isinstance(value, int):
                raise ConfigError(f"{name}.{key}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{name}.{key}: expected a string, got {value!r}")
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{name}.{key}: expected a list, got {value!r}")
        setattr(section, key, value)
    return section


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level: expected an object with config sections")
    cfg = ExperimentConfig()
    for key, value in data.items():
        if key == "out":
            if not isinstance(value, str):
                raise ConfigError(f"out: expected a string, got {value!r}")
            cfg.out = value
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section "
                              f"(expected one of {sorted(_SECTIONS)} or 'out')")
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object")
        setattr(cfg, key, _build_section(key, _SECTIONS[key], value))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    d, m, s = cfg.dataset, cfg.model, cfg.strategy
    if d.nx < 3:
        raise ConfigError(f"dataset.nx: must be >= 3, got {d.nx}")
    if d.samples_per_group < 1:
        raise ConfigError("dataset.samples_per_group: must be >= 1")
    if d.length_scale <= 0:
        raise ConfigError("dataset.length_scale: must be positive")
    if not 0.0 < d.eval_fraction < 1.0:
        raise ConfigError("dataset.eval_fraction: must be in (0, 1)")
    for i, pair in enumerate(d.schedule):
        if (not isinstance(pair, (list, tuple)) or len(pair) != 2
                or not all(isinstance(v, (int, float)) for v in pair)):
            raise ConfigError(f"dataset.schedule[{i}]: expected [mu, sigma]")
    if m.channels % m.heads != 0:
        raise ConfigError(f"model.channels: {m.channels} not divisible by "
                          f"model.heads = {m.heads}")
    if s.name not in ("joint", "naive_finetune", "replay", "sft"):
        raise ConfigError(f"strategy.name: unknown strategy {s.name!r}")
    if s.epochs < 0:
        raise ConfigError("strategy.epochs: must be >= 0")
    if s.lr <= 0:
        raise ConfigError("strategy.lr: must be positive")
    try:
        cfg.loss_config()
        cfg.replay_plan()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 < s.sft_decile < 1.0:
        raise ConfigError("strategy.sft_decile: must be in (0, 1)")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
