"""Run configuration: a versioned YAML document with strict keys.

Unknown keys anywhere in the document are errors, reported with their
dotted path, so a recipe cannot silently drift.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .prw import ModelConfig
from .trainer import StageConfig, default_stages, validate_stages

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the problem."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DataConfig:
    eval_samples: int = 64  # held-out samples per task
    eval_seed_offset: int = 1000  # held-out seed = run seed + offset

    def __post_init__(self):
        if self.eval_samples < 1:
            raise ValueError("eval_samples must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: List[StageConfig] = field(default_factory=default_stages)
    data: DataConfig = field(default_factory=DataConfig)
    checkpoint_every: int = 0  # mid-stage checkpoint interval in steps; 0 disables

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        validate_stages(self.stages)

    @property
    def eval_seed(self) -> int:
        return (self.seed + self.data.eval_seed_offset) % 2**64


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else key
        f = names[key]
        if cls is RunConfig and key == "model":
            value = _build(ModelConfig, value, sub)
        elif cls is RunConfig and key == "data":
            value = _build(DataConfig, value, sub)
        elif cls is RunConfig and key == "stages":
            if not isinstance(value, list):
                raise ConfigError(sub, "expected a list of stages")
            value = [_build(StageConfig, s, f"{sub}[{i}]") for i, s in enumerate(value)]
        else:
            value = _check_scalar(f, value, sub)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from exc


_SCALARS = {"int": int, "float": float, "str": str, "bool": bool,
            "Optional[float]": float, "Optional[bool]": bool}


def _check_scalar(f: dataclasses.Field, value: Any, path: str):
    kind = _SCALARS.get(str(f.type))
    if kind is None or (value is None and str(f.type).startswith("Optional")):
        return value
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(path, f"expected {kind.__name__}, got {value!r}")
    return value


def from_dict(raw: Dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "configuration must be a mapping")
    version = raw.get("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"expected {CONFIG_VERSION}, got {version!r}")
    return _build(RunConfig, raw, "")


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from exc
    return from_dict(raw)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=False)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def packaged(name: str) -> Path:
    """Path of a config shipped with the package (``toy``, ``smoke``, ...)."""
    return Path(__file__).parent / "configs" / f"{name}.yaml"
