"""Experiment configuration: defaults, TOML loading, validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

import tomli


class ConfigError(ValueError):
    pass


INIT_STRATEGIES = ("encoder-seeded", "all-encoder", "zero")


@dataclass
class ExperimentConfig:
    task: str = "logic"
    seed: int = 0
    out_dir: str = "runs"

    # latent space
    latent_dim: int = 64
    trajectory_length: int = 8

    # training
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    alpha_contr: float = 0.1
    alpha_dec: float = 1.0
    alpha_smooth: float = 0.01
    dual_path: bool = False

    # planner
    planner_steps: int = 50
    planner_lr: float = 0.01
    langevin_noise: float = 0.005
    clip_norm: float = 1.0
    anchor_weight: float = 0.0
    init_strategy: str = "encoder-seeded"
    init_sigma: float = 0.1
    snapshot_stride: int = 1

    # networks
    energy_hidden: int = 128
    energy_layers: int = 3
    global_hidden: int = 16
    head_hidden: int = 128
    head_layers: int = 2
    arith_decoder_layers: int = 3
    arith_embed_dim: int = 32

    # data
    train_size: int = 5000
    val_size: int = 500
    test_size: int = 1000
    graph_nodes_min: int = 8
    graph_nodes_max: int = 20
    edge_prob: float = 0.3
    arith_max_depth: int = 4
    arith_scale: float = 1000.0
    logic_vars: int = 5
    clauses_min: int = 3
    clauses_max: int = 10

    # contrastive training knobs
    teacher_sigma: float = 0.01
    margin: float = 1.0
    negative_scale: float = 0.5
    planner_negative_every: int = 10
    train_planner_steps: int = 10
    contrastive_success_threshold: float = 0.8

    def validate(self):
        if self.task not in ("graph", "arithmetic", "logic"):
            raise ConfigError(f"task: unknown task {self.task!r}")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ConfigError(f"init_strategy: must be one of {INIT_STRATEGIES}")
        positive = ("latent_dim", "trajectory_length", "batch_size", "energy_hidden", "head_hidden",
                    "global_hidden", "snapshot_stride", "planner_negative_every", "clip_norm")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be positive")
        nonneg = ("epochs", "planner_steps", "alpha_contr", "alpha_dec", "alpha_smooth", "anchor_weight",
                  "langevin_noise", "init_sigma", "teacher_sigma", "margin", "weight_decay", "train_planner_steps",
                  "train_size", "val_size", "test_size")
        for key in nonneg:
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0")
        if self.planner_steps > 0 and self.planner_lr <= 0:
            raise ConfigError("planner_lr: must be positive when planner_steps > 0")
        if self.energy_layers < 2 or self.head_layers < 2 or self.arith_decoder_layers < 2:
            raise ConfigError("layer counts must be >= 2")
        if not 0 < self.edge_prob <= 1:
            raise ConfigError("edge_prob: must be in (0, 1]")
        if not 1 <= self.arith_max_depth <= 4:
            raise ConfigError("arith_max_depth: must be in [1, 4]")
        if self.clauses_min > self.clauses_max or self.graph_nodes_min > self.graph_nodes_max:
            raise ConfigError("size ranges must satisfy min <= max")
        return self

    def replace(self, **overrides):
        return from_dict({**self.to_dict(), **overrides})

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self, exclude=("out_dir",)):
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def split_sizes(self):
        return (self.train_size, self.val_size, self.test_size)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def from_dict(raw: dict) -> ExperimentConfig:
    values = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        expected = _TYPES[_FIELDS[key].type]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"{key}: expected {expected.__name__}, got {type(value).__name__}")
        values[key] = value
    return ExperimentConfig(**values).validate()


def load_config(path=None) -> ExperimentConfig:
    """Read a flat TOML file; missing keys take the defaults above."""
    if path is None:
        return ExperimentConfig().validate()
    with open(path, "rb") as f:
        try:
            raw = tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return from_dict(raw)


# reduced-scale protocol used by every ablation set
ABLATION_SCALE = {"train_size": 500, "val_size": 50, "test_size": 100, "epochs": 30}
