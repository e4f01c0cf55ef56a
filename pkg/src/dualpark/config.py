"""Experiment configuration: one JSON document, overridable key by key from the CLI."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .control import ControllerConfig
from .model import ModelConfig
from .synth import SynthConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    count: int = 100
    seed: int = 0
    mode: str = "direct-bev"
    test_count: int = 0  # extra held-out trajectories generated by ``ablate``


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    control: ControllerConfig = field(default_factory=ControllerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return build(cls, d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build(cls, data: dict):
    """Instantiate (nested) dataclass ``cls`` from a plain dict; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = build(hint, value)
        kwargs[name] = value
    return cls(**kwargs)


def leaves(cls, prefix: str = "") -> list[tuple[str, type]]:
    """Dotted paths and types of every scalar config field."""
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(hint):
            out.extend(leaves(hint, path + "."))
        else:
            out.append((path, hint))
    return out


def parse_value(text: str, hint):
    """Parse a CLI string for a field annotated ``hint``."""
    args = typing.get_args(hint)
    if args and type(None) in args:
        if text.lower() in ("none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if hint in (int, float, str):
        return hint(text)
    raise ValueError(f"cannot parse {text!r} as {hint}")


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    d = cfg.to_dict()
    for path, value in overrides.items():
        node = d
        *parents, last = path.split(".")
        for p in parents:
            node = node[p]
        if last not in node:
            raise ValueError(f"unknown config key {path!r}")
        node[last] = value
    return ExperimentConfig.from_dict(d)
