"""Run configuration: YAML file -> validated dataclasses.

Unknown keys are rejected so typos fail fast, before any compute starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import yaml

from . import models, physics
from .physics import SystemSpec


class ConfigError(Exception):
    pass


def _from_mapping(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(doc).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class SystemConfig:
    kind: str = "pendulum"
    n: int = 3
    mass: float = 1.0
    length: float = 1.0
    rest_length: float = 1.0
    stiffness: float = 1.0
    gravity: float = 9.81

    def to_spec(self) -> SystemSpec:
        try:
            if self.kind == physics.PENDULUM:
                return physics.pendulum(self.n, mass=self.mass, length=self.length,
                                        gravity=self.gravity)
            if self.kind == physics.SPRING:
                return physics.spring(self.n, mass=self.mass,
                                      rest_length=self.rest_length,
                                      stiffness=self.stiffness)
        except physics.PhysicsError as exc:
            raise ConfigError(f"system: {exc}") from exc
        raise ConfigError(f"system: unknown kind {self.kind!r}")

    def spec_with_n(self, n: int) -> SystemSpec:
        cfg = SystemConfig(kind=self.kind, n=n, mass=self.mass, length=self.length,
                           rest_length=self.rest_length, stiffness=self.stiffness,
                           gravity=self.gravity)
        return cfg.to_spec()


@dataclass
class DataConfig:
    n_traj: int = 100
    points_per_traj: int = 100
    dt: Optional[float] = None
    record_every: Optional[int] = None

    def __post_init__(self):
        if self.n_traj < 1 or self.points_per_traj < 1:
            raise ConfigError("data: n_traj and points_per_traj must be >= 1")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("data: dt must be positive")
        if self.record_every is not None and self.record_every < 1:
            raise ConfigError("data: record_every must be >= 1")


@dataclass
class ModelConfig:
    variant: str = "graph"
    embed_dim: int = 5
    hidden: int = 5
    msg_layers: int = 1
    baseline_hidden: int = 16

    def __post_init__(self):
        if self.variant not in models.VARIANTS:
            raise ConfigError(
                f"model: unknown variant {self.variant!r}; choose from {models.VARIANTS}"
            )
        if min(self.embed_dim, self.hidden, self.msg_layers, self.baseline_hidden) < 1:
            raise ConfigError("model: dimensions must be >= 1")


@dataclass
class TrainBlockConfig:
    lr: float = 1e-3
    batch_size: int = 100
    max_epochs: int = 10000
    stop_window: int = 100
    stop_threshold: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("train: lr/batch_size/max_epochs invalid")


@dataclass
class EvalConfig:
    horizon: Optional[float] = None
    n_init: int = 100
    targets: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.horizon is not None and self.horizon <= 0:
            raise ConfigError("eval: horizon must be positive")
        if self.n_init < 1:
            raise ConfigError("eval: n_init must be >= 1")
        if any(int(t) < 1 for t in self.targets):
            raise ConfigError("eval: target sizes must be >= 1")
        self.targets = [int(t) for t in self.targets]


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainBlockConfig = field(default_factory=TrainBlockConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs"

    def validate(self) -> None:
        self.system.to_spec()  # raises ConfigError on a bad system block


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a mapping, got {type(doc).__name__}")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"config: unknown top-level keys {sorted(unknown)}")
    cfg = RunConfig(
        system=_from_mapping(SystemConfig, doc.get("system", {}), "system"),
        data=_from_mapping(DataConfig, doc.get("data", {}), "data"),
        model=_from_mapping(ModelConfig, doc.get("model", {}), "model"),
        train=_from_mapping(TrainBlockConfig, doc.get("train", {}), "train"),
        eval=_from_mapping(EvalConfig, doc.get("eval", {}), "eval"),
        seed=int(doc.get("seed", 0)),
        out_dir=str(doc.get("out_dir", "runs")),
    )
    cfg.validate()
    return cfg
