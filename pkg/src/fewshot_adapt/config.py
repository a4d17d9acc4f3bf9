"""JSON experiment configs mapped onto the nested config dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path

from .pipeline import ExperimentConfig


class ConfigError(ValueError):
    pass


REQUIRED = ("seed",)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        path = f"{where}.{name}" if where else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple) or hints.get(name) is tuple:
            kwargs[name] = _tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _tuple(value):
    if isinstance(value, list):
        return tuple(_tuple(v) for v in value)
    return value


def config_from_dict(data: dict, seed: int | None = None) -> ExperimentConfig:
    """Build an ``ExperimentConfig``; ``seed`` (e.g. from ``--seed``) overrides the file."""
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    for name in REQUIRED:
        if data.get(name) is None:
            raise ConfigError(f"missing required field '{name}'")
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        raise ConfigError("field 'seed' must be an integer")
    cfg = _build(ExperimentConfig, data, "")
    return cfg.with_seed(cfg.seed)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data, seed)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(config_to_dict(cfg), sort_keys=True).encode()).hexdigest()
