from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

# fixed ids: adding a stream must never renumber the existing ones
_STREAMS = {"data": 0, "init": 1, "shuffle": 2, "val": 3, "teacher_init": 4, "meta_init": 5, "test": 6}


def stream_seed(master: int, name: str) -> int:
    """Derive an independent 32-bit seed for a named random stream."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(_STREAMS[name],))
    return int(ss.generate_state(1)[0])


def stream_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, name))


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    eta_theta: float = 0.1
    eta_phi: float = 1e-3
    k: int = 5
    tau: float = 4.0
    epochs: int = 120
    milestones: tuple[int, ...] = (80, 100)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    val_batch_size: int = 128
    alpha: float = 0.5
    meta_hidden: int = 64
    meta_optimizer: str = "adam"
    # divide eta_phi by k so the summed hypergradient acts like an average
    meta_lr_per_k: bool = False
    # delay the first meta update until a full window of k batches
    strict_window: bool = False
    virtual_momentum: bool = False
    clip_meta_inputs: float | None = None
    pinned_weights: tuple[float, float] | None = None
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.pinned_weights is not None:
            self.pinned_weights = tuple(float(v) for v in self.pinned_weights)
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.eta_theta <= 0:
            raise ConfigError(f"eta_theta must be positive, got {self.eta_theta}")
        if self.eta_phi < 0:
            raise ConfigError(f"eta_phi must be non-negative, got {self.eta_phi}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.batch_size < 1 or self.val_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.meta_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"meta_optimizer must be adam or sgd, got {self.meta_optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def meta_lr(self) -> float:
        return self.eta_phi / self.k if self.meta_lr_per_k else self.eta_phi

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["milestones"] = list(self.milestones)
        if self.pinned_weights is not None:
            d["pinned_weights"] = list(self.pinned_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        return _build(cls, d, "train")


@dataclass
class DataConfig:
    source: str = "synthetic"
    classes: int = 10
    n_max: int = 1000
    rho: float = 50.0
    dim: int = 32
    separation: float = 3.0
    cov_scale: float = 1.0
    val_total: int = 1000
    test_per_class: int = 200
    cifar_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"source must be synthetic or cifar10, got {self.source!r}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if not self.rho >= 1:
            raise ConfigError(f"rho must be >= 1, got {self.rho}")
        if self.n_max < 1:
            raise ConfigError(f"n_max must be >= 1, got {self.n_max}")
        if self.val_total % self.classes:
            raise ConfigError(f"val_total {self.val_total} is not divisible by {self.classes} classes")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DataConfig":
        return _build(cls, d, "data")


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = "bikd"
    teacher_widths: tuple[int, ...] = (32, 256, 256, 10)
    student_widths: tuple[int, ...] = (32, 64, 10)
    backbone: str = "mlp"
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.teacher_widths = tuple(int(v) for v in self.teacher_widths)
        self.student_widths = tuple(int(v) for v in self.student_widths)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.method not in ("ce", "kd", "bikd"):
            raise ConfigError(f"method must be one of ce, kd, bikd; got {self.method!r}")
        if self.backbone not in ("mlp", "cnn"):
            raise ConfigError(f"backbone must be mlp or cnn, got {self.backbone!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "train": self.train.to_dict(),
            "method": self.method,
            "teacher_widths": list(self.teacher_widths),
            "student_widths": list(self.student_widths),
            "backbone": self.backbone,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        train = TrainConfig.from_dict(d.pop("train", {}))
        return _build(cls, {**d, "train": train}, "experiment")


def _build(cls, d: Mapping[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {where} config keys: {', '.join(unknown)}")
    return cls(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)
