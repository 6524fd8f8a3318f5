"""YAML run configuration: nested dataclasses, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

import yaml

from .model import ModelConfig
from .training import StagePlan, SuiteSizes

CONFIG_FORMAT = "hlora-lab-config/1"


class ConfigError(ValueError):
    pass


@dataclass
class CodecConfig:
    corpus_size: int = 400


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: StagePlan = field(default_factory=StagePlan)
    data: SuiteSizes = field(default_factory=SuiteSizes)
    codec: CodecConfig = field(default_factory=CodecConfig)
    seed: int = 0
    sweep_base_steps: int = 400

    def to_dict(self) -> dict:
        return {"format": CONFIG_FORMAT, **_plain(dataclasses.asdict(self))}

    def model_hash(self) -> str:
        """Identifies everything a checkpoint's tensors depend on."""
        payload = {"model": _plain(dataclasses.asdict(self.model)), "codec": dataclasses.asdict(self.codec)}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        path = f"{where}.{f.name}" if where else f.name
        if dataclasses.is_dataclass(hint):
            if isinstance(value, dict) and _constructible(cls):
                # partial sections fill in from the parent's default
                base = dataclasses.asdict(getattr(cls(), f.name))
                unknown = set(value) - set(base)
                if unknown:
                    raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
                value = {**base, **value}
            value = _build(hint, value, path)
        elif typing.get_origin(hint) is tuple:
            value = tuple(value)
        elif typing.get_origin(hint) is dict:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a mapping")
            default = getattr(cls(), f.name) if _constructible(cls) else {}
            unknown = set(value) - set(default) if default else set()
            if unknown:
                raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
            value = {**default, **value}
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _constructible(cls) -> bool:
    try:
        cls()
    except TypeError:
        return False
    return True


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    fmt = data.pop("format", CONFIG_FORMAT)
    if fmt != CONFIG_FORMAT:
        raise ConfigError(f"unsupported config format {fmt!r}, expected {CONFIG_FORMAT!r}")
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
