"""Run configuration read from a single YAML file."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .downstream import K_FOLDS, L1_GRID, TASK_COLUMNS
from .graphs import GraphConfig
from .model import Ablation
from .proximity import ThresholdRule
from .training import TrainConfig

SWEEP_LAMBDAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
SWEEP_DIMS = (4, 8, 16, 32, 64)


class ConfigError(ValueError):
    pass


@dataclass
class SweepSpec:
    lambdas: list[float] = field(default_factory=lambda: list(SWEEP_LAMBDAS))
    dims: list[int] = field(default_factory=lambda: list(SWEEP_DIMS))


@dataclass
class RunConfig:
    data: str = "data"
    year: int | None = None  # reference year t; None means the second-to-last panel year
    out: str = "runs"
    task: str = "new_companies_next_year"
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: ThresholdRule = field(default_factory=ThresholdRule)
    graphs: GraphConfig = field(default_factory=GraphConfig)
    l1_grid: list[float] = field(default_factory=lambda: list(L1_GRID))
    k_folds: int = K_FOLDS
    eval_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        if self.task not in TASK_COLUMNS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {sorted(TASK_COLUMNS)}")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be at least 2")
        if not self.seeds:
            raise ConfigError("seeds must list at least one training seed")
        if self.threshold.kind not in ("percentile", "fixed"):
            raise ConfigError(f"unknown threshold kind {self.threshold.kind!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["train"]["ablation"] = asdict(self.train.ablation)
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    nested = {
        "train": TrainConfig,
        "threshold": ThresholdRule,
        "graphs": GraphConfig,
        "sweep": SweepSpec,
    }
    parts = {}
    for key, cls in nested.items():
        sub = raw.pop(key, None)
        if key == "train" and isinstance(sub, dict) and isinstance(sub.get("ablation"), dict):
            sub = dict(sub, ablation=_build(Ablation, sub["ablation"], "train.ablation"))
        parts[key] = _build(cls, sub, key)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    try:
        return RunConfig(**raw, **parts)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)
