"""Run configuration files: one JSON document with model / distill / data /
train / bench sections, strict key checking and ``key=value`` overrides."""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .data import SyntheticSpec
from .losses import DistillConfig
from .models import ModelConfig
from .pipeline import TrainConfig, config_hash
from .serve import LatencyScenario

SCHEMA_VERSION = 1
SECTIONS = {
    "model": ModelConfig,
    "distill": DistillConfig,
    "data": SyntheticSpec,
    "train": TrainConfig,
    "bench": LatencyScenario,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfigFile:
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: LatencyScenario = field(default_factory=LatencyScenario)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"schema_version": SCHEMA_VERSION}
        for name in SECTIONS:
            out[name] = _jsonable(asdict(getattr(self, name)))
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfigFile":
        d = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override '{item}' is not of the form section.key=value")
            section, dot, name = key.strip().partition(".")
            if not dot or section not in SECTIONS:
                raise ConfigError(f"unknown config key '{key.strip()}'")
            if name not in _field_types(SECTIONS[section]):
                raise ConfigError(f"unknown config key '{key.strip()}'")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            d[section][name] = value
        return from_dict(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _field_types(cls) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints.get(f.name, Any) for f in fields(cls)}


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = typing.get_args(tp)
        inner = args[0] if args else None
        return tuple(_coerce(v, inner, where) if inner not in (None, Ellipsis) else v for v in value)
    return value


def _section(cls, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    types = _field_types(cls)
    for key in raw:
        if key not in types:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    kwargs = {k: _coerce(v, types[k], f"{name}.{k}") for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section '{name}': {exc}") from None


def from_dict(d: Dict[str, Any]) -> RunConfigFile:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    for key in d:
        if key != "schema_version" and key not in SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    return RunConfigFile(**{name: _section(cls, d.get(name, {}), name) for name, cls in SECTIONS.items()})


def loads(text: str) -> RunConfigFile:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return from_dict(d)


def load(path, overrides: Optional[Iterable[str]] = None) -> RunConfigFile:
    cfg = loads(Path(path).read_text())
    return cfg.with_overrides(overrides) if overrides else cfg
