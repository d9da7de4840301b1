"""Run configuration: one JSON file binding every command.

Unknown keys are errors, and every key can be overridden from the command line
with ``--set section.key=value``. The top-level ``seed`` drives data
generation, initialisation, branching and inner loops alike.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .adversary import InnerLoopConfig, LatConfig
from .bench import BenchSpec, Judge
from .model import DecodeConfig, ModelConfig
from .trainer import OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration field; the message names the field."""


@dataclass(frozen=True)
class AnalysisConfig:
    embedding_layer: int | None = None
    judge: str = "exact"
    tie_tolerance: float = 1e-9
    include_original: bool = True

    def __post_init__(self):
        Judge(self.judge, self.tie_tolerance)


@dataclass(frozen=True)
class EvalConfig:
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(mode="greedy"))
    reference_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.reference_fraction <= 1:
            raise ConfigError("eval.reference_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class DynamicsConfig:
    epsilons: tuple[float, ...] = (0.01, 0.05, 0.10)
    n_examples: int = 8
    iterations: int = 30

    def __post_init__(self):
        object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        if not self.epsilons or any(e < 0 for e in self.epsilons):
            raise ConfigError("dynamics.epsilons must be a nonempty list of values >= 0")
        if self.n_examples < 1 or self.iterations < 1:
            raise ConfigError("dynamics.n_examples and dynamics.iterations must be >= 1")


@dataclass(frozen=True)
class SweepConfig:
    layers: tuple[int, ...] | None = None  # None: 0, L/4, L/2, 3L/4

    def __post_init__(self):
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))

    def resolve(self, n_layers: int) -> tuple[int, ...]:
        if self.layers is not None:
            return self.layers
        return tuple(sorted({0, n_layers // 4, n_layers // 2, (3 * n_layers) // 4}))


@dataclass(frozen=True)
class CompareConfig:
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("compare.seeds must be nonempty")


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "runs/default"
    data_dir: str = "runs/default/data"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchSpec = field(default_factory=BenchSpec)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.bench.vocab != self.model.vocab_size:
            raise ConfigError(f"bench.vocab ({self.bench.vocab}) must equal model.vocab_size ({self.model.vocab_size})")
        layer = self.train.injection_layer
        if layer is not None and not 0 <= layer <= self.model.n_layers:
            raise ConfigError(f"train.injection_layer {layer} outside [0, {self.model.n_layers}]")
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))


# fields that exist on the dataclasses but are owned elsewhere in the file form
_HIDDEN = {TrainConfig: {"seed"}}


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        hidden = _HIDDEN.get(type(obj), set())
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in hidden}
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    return obj


def _dataclass_type(tp):
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data: Any, where: str = ""):
    """Build dataclass ``cls`` from plain data, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)} - _HIDDEN.get(cls, set())
    kwargs = {}
    for key, value in data.items():
        name = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"unknown config field {name!r}")
        sub = _dataclass_type(hints[key])
        if sub is not None and isinstance(value, dict):
            value = from_dict(sub, value, name)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err) if str(err).startswith(where + ".") else f"{where or 'config'}: {err}") from err


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = {} if path is None else json.loads(Path(path).read_text())
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node[parts[-1]] = value
    return from_dict(RunConfig, data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def digest(cfg: RunConfig) -> str:
    canonical = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


__all__ = [
    "AnalysisConfig", "CompareConfig", "ConfigError", "DynamicsConfig", "EvalConfig", "InnerLoopConfig",
    "LatConfig", "OptimizerConfig", "PathsConfig", "RunConfig", "SweepConfig", "digest", "dumps",
    "from_dict", "load_config", "to_dict",
]
