"""Run configuration: one JSON file describing a whole experiment.

Strict parsing: unknown keys anywhere are an error, and a config
round-trips losslessly through render/parse.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

METHODS = ("flop-l0", "flop-agp", "np-l0", "fac")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 256
    hidden: int = 256
    layers: int = 2
    rank: int | None = None
    adaptive_embedding: bool = False
    cluster_quantiles: list = field(default_factory=lambda: [0.2, 0.5])
    cluster_dim_divisors: list = field(default_factory=lambda: [1, 2, 4])
    tie_weights: bool = False


@dataclass
class GateConfig:
    alpha_init: float = 2.2
    l: float = -0.1
    r: float = 1.1
    beta: float = 1.0
    jitter: float = 0.01
    kept_value_mode: str = "mean_logit"


@dataclass
class ControllerConfig:
    anneal_steps: int = 1500
    lr_lambda: float = 4.0
    normalize: bool = True
    target_scope: str = "total"  # or "prunable"


@dataclass
class AgpConfig:
    begin_step: int = 0
    end_step: int = 1000
    prune_frequency: int = 50
    l1_coeff: float = 1e-4
    initial_sparsity: float = 0.0


@dataclass
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 200
    batch_size: int = 32
    unroll: int = 64
    lr: float = 0.3
    momentum: float = 0.9
    lr_warmup: int = 100
    clip_norm: float = 1.0
    alpha_lr_scale: float = 40.0
    alpha_momentum: float = 0.0
    eval_every: int = 0
    log_every: int = 10


@dataclass
class RunConfig:
    corpus_path: str = ""
    corpus_mode: str = "byte"
    split_fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    method: str = "flop-l0"
    target_compression: float = 0.5
    seed: int = 0
    out_dir: str = ""
    precision: str = "float64"
    model: ModelConfig = field(default_factory=ModelConfig)
    gates: GateConfig = field(default_factory=GateConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    agp: AgpConfig = field(default_factory=AgpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.target_compression < 1.0:
            raise ConfigError("target_compression must be in [0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be float64 or float32")
        if self.controller.target_scope not in ("total", "prunable"):
            raise ConfigError("target_scope must be 'total' or 'prunable'")


_SECTIONS = {
    "model": ModelConfig,
    "gates": GateConfig,
    "controller": ControllerConfig,
    "agp": AgpConfig,
    "train": TrainConfig,
}


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _SECTIONS.get(key) if cls is RunConfig else None
        kwargs[key] = _from_dict(sub, value, f"{path}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "config")


def render(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse(data)


def save(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(render(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def default_out_dir() -> str:
    return os.environ.get("FACTORPRUNE_OUT", "runs")
