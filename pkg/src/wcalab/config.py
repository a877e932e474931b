"""Experiment configuration: nested dataclasses loaded from one JSON document.

Precedence, lowest to highest: dataclass defaults, the JSON file, command
line flags (``--seed``, ``--out``, ``--data``). Unknown keys anywhere in the
document are rejected before any computation starts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

GRID = (1e-1, 1e-2, 1e-3, 1e-4)
EPS_BOUND = (0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


class ConfigError(ValueError):
    """Invalid or unrecognised configuration."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "mnist01"  # mnist01 | mnist | blobs
    classes: tuple[int, int] = (0, 1)
    pca_dim: int = 32
    n_test: int = 1000
    # blobs
    n_per_class: int = 500
    means: tuple[tuple[float, ...], ...] = ((0.3, 0.3), (0.7, 0.7))
    std: float = 0.08
    box: tuple[float, float] = (0.0, 1.0)

    def validate(self):
        if self.kind not in ("mnist01", "mnist", "blobs"):
            raise ConfigError(f"dataset.kind must be mnist01, mnist or blobs, not {self.kind!r}")
        if self.pca_dim < 1 or self.n_test < 1 or self.n_per_class < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.std <= 0:
            raise ConfigError("dataset.std must be positive")
        if self.box[0] > self.box[1]:
            raise ConfigError("dataset.box lower bound exceeds upper bound")


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = ()
    d: int | None = None
    noise: str = "anisotropic"  # anisotropic | isotropic | diagonal | none
    l_init: float = 0.1

    def validate(self):
        if self.noise not in ("anisotropic", "isotropic", "diagonal", "none"):
            raise ConfigError(f"model.noise {self.noise!r} not recognised")
        if any(h < 1 for h in self.hidden) or (self.d is not None and self.d < 1):
            raise ConfigError("layer sizes must be positive")


@dataclass(frozen=True)
class ObjectiveSpec:
    loss: str = "hinge"
    lam: float = 1e-4
    wca: bool = True
    wca_weight: float = 1.0
    regularizer: str = "penalty"  # penalty | constraint
    gamma: float = 5.0
    tau: float = 5.0
    penalize_bias: bool = False

    def validate(self):
        if self.loss not in ("hinge", "cross_entropy"):
            raise ConfigError(f"objective.loss {self.loss!r} not recognised")
        if self.lam < 0:
            raise ConfigError("objective.lam must be >= 0")
        if self.regularizer not in ("penalty", "constraint"):
            raise ConfigError("objective.regularizer must be penalty or constraint")
        if self.gamma <= 0 or self.tau <= 0:
            raise ConfigError("gamma and tau must be positive")


@dataclass(frozen=True)
class TrainingSpec:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    grid: bool = False
    grid_values: tuple[float, ...] = GRID
    val_fraction: float = 0.1

    def validate(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("training needs lr > 0, epochs >= 1, batch_size >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("training.val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class AttackSpec:
    name: str = "pgd"  # fgsm | pgd | cw | one_pixel | square | random
    eps: tuple[float, ...] = EPS_BOUND
    norm: str = "inf"
    steps: int = 40
    alpha: float | None = None
    restarts: int = 5
    eot_samples: int = 50
    sweep: bool = False  # eps = 2^n / 255, n = 0..7
    loss: str = "margin"  # margin | cross_entropy | hinge

    def validate(self):
        if self.name not in ("fgsm", "pgd", "cw", "one_pixel", "square", "random"):
            raise ConfigError(f"attack {self.name!r} not recognised")
        if any(e < 0 for e in self.eps):
            raise ConfigError("attack budgets must be >= 0")
        if self.steps < 1 or self.restarts < 1 or self.eot_samples < 1:
            raise ConfigError("steps, restarts and eot_samples must be >= 1")
        if self.loss not in ("margin", "cross_entropy", "hinge"):
            raise ConfigError(f"attack loss {self.loss!r} not recognised")

    @property
    def budgets(self) -> tuple[float, ...]:
        return tuple(2.0 ** n / 255.0 for n in range(8)) if self.sweep else self.eps


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    attacks: tuple[AttackSpec, ...] = (AttackSpec(),)
    out: str = "out"
    data: str | None = None
    seeds: int = 1
    eval_draws: int = 50

    def validate(self) -> "ExperimentConfig":
        for part in (self.dataset, self.model, self.objective, self.training, *self.attacks):
            part.validate()
        if self.seeds < 1 or self.eval_draws < 1:
            raise ConfigError("seeds and eval_draws must be >= 1")
        return self

    @property
    def seed(self) -> int:
        return self.training.seed

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def digest(self) -> str:
        """sha256 of the canonical JSON form, truncated to 16 hex digits.

        ``out`` is left out: where results are written does not change them.
        """
        body = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with whole sections or nested fields swapped.

        ``cfg.replace(model={"noise": "isotropic"}, seeds=5)``
        """
        raw = self.to_dict()
        for key, value in sections.items():
            if key not in raw:
                raise ConfigError(f"unknown key(s) in config: {key}")
            if dataclasses.is_dataclass(value) or (isinstance(value, tuple) and value
                                                   and dataclasses.is_dataclass(value[0])):
                value = _jsonable(dataclasses.asdict(value) if dataclasses.is_dataclass(value)
                                  else [dataclasses.asdict(v) for v in value])
            if isinstance(value, dict) and isinstance(raw[key], dict):
                raw[key] = {**raw[key], **_jsonable(value)}
            else:
                raw[key] = _jsonable(value)
        return from_dict(raw)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key == "attacks":
            if not isinstance(value, list) or not value:
                raise ConfigError("attacks must be a non-empty list")
            kwargs[key] = tuple(_build(AttackSpec, a, f"attacks[{i}]") for i, a in enumerate(value))
        elif key in ("dataset", "model", "objective", "training"):
            sub = {"dataset": DatasetSpec, "model": ModelSpec, "objective": ObjectiveSpec,
                   "training": TrainingSpec}[key]
            kwargs[key] = _build(sub, value, key)
        else:
            kwargs[key] = _tuplify(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "config").validate()


def load(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, out: str | None = None,
                   data: str | None = None) -> ExperimentConfig:
    """Apply command-line flags on top of a loaded config."""
    if seed is not None:
        cfg = cfg.replace(training={"seed": int(seed)})
    if out is not None:
        cfg = cfg.replace(out=out)
    if data is not None:
        cfg = cfg.replace(data=data)
    return cfg


def blobs_config(**overrides) -> ExperimentConfig:
    """Default desk setup for the 2-D toy: relu MLP with a 2-wide bottleneck."""
    base = ExperimentConfig(
        dataset=DatasetSpec(kind="blobs"),
        model=ModelSpec(hidden=(16,), d=2),
        objective=ObjectiveSpec(loss="cross_entropy"),
        training=TrainingSpec(lr=1e-1, epochs=30),
        attacks=(AttackSpec(name="pgd", sweep=True, steps=20, restarts=1),),
    )
    return base.replace(**overrides) if overrides else base.validate()
