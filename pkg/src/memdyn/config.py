"""Experiment configuration: one JSON document drives every stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from memdyn import attacks, hardness, optim
from memdyn.data import DatasetSpec
from memdyn.trainer import TrainConfig


class ConfigError(ValueError):
    """The configuration is malformed or fails validation."""


@dataclasses.dataclass(frozen=True)
class AttackConfig:
    method: str = "lira"
    variance_mode: str = "global"
    threshold: float = 0.0
    leave_one_out: bool = True

    def lira(self) -> attacks.LiraConfig:
        return attacks.LiraConfig(self.variance_mode, self.threshold, self.leave_one_out)

    def validate(self) -> None:
        if self.method not in attacks.METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        self.lira().validate()


@dataclasses.dataclass(frozen=True)
class DynamicsConfig:
    entropy_resolution: int = 30
    dbscan_eps: float = 0.02
    dbscan_min_pts: int = 5
    theta_vuln: float = 0.0

    def validate(self) -> None:
        if self.entropy_resolution < 2:
            raise ValueError("entropy_resolution must be >= 2")
        if self.dbscan_eps <= 0 or self.dbscan_min_pts < 1:
            raise ValueError("dbscan_eps must be positive and dbscan_min_pts >= 1")


@dataclasses.dataclass(frozen=True)
class HardnessConfig:
    ensemble: str = "out"
    checkpoint: int = -1  # index into the checkpoint schedule; -1 is the last
    damping: float = 0.01

    def validate(self) -> None:
        if self.ensemble not in hardness.ENSEMBLES:
            raise ValueError(f"unknown ensemble {self.ensemble!r}")
        if self.damping <= 0:
            raise ValueError("damping must be positive")


@dataclasses.dataclass(frozen=True)
class ReportConfig:
    n_trajectories: int = 10
    histograms: bool = True

    def validate(self) -> None:
        if self.n_trajectories < 0:
            raise ValueError("n_trajectories must be >= 0")


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    dataset: DatasetSpec = DatasetSpec()
    hidden: tuple[int, ...] = (64, 64)
    optimizer: optim.OptimizerConfig = optim.OptimizerConfig()
    epochs: int = 60
    checkpoint_interval: int = 5
    batch_size: int = 32
    n_shadow: int = 16
    attack: AttackConfig = AttackConfig()
    dynamics: DynamicsConfig = DynamicsConfig()
    hardness: HardnessConfig = HardnessConfig()
    report: ReportConfig = ReportConfig()

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.hidden, self.epochs, self.checkpoint_interval,
                           self.batch_size, self.optimizer)

    def validate(self) -> None:
        if not 0 <= self.seed < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")
        if not self.hidden or any(w <= 0 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.n_shadow < 4:
            raise ValueError("n_shadow must be >= 4")
        self.dataset.validate()
        self.train_config().validate()
        for part in (self.attack, self.dynamics, self.hardness, self.report):
            part.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        nested = {
            "dataset": DatasetSpec,
            "optimizer": optim.OptimizerConfig,
            "attack": AttackConfig,
            "dynamics": DynamicsConfig,
            "hardness": HardnessConfig,
            "report": ReportConfig,
        }
        kwargs = _fields(cls, raw, "config")
        for key, sub in nested.items():
            if key in kwargs:
                kwargs[key] = sub(**_fields(sub, kwargs[key], key))
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(int(w) for w in kwargs["hidden"])
        try:
            cfg = cls(**kwargs)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg


def _fields(cls, raw, where: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return dict(raw)


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return PipelineConfig.from_dict(raw)
