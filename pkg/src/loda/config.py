"""INI-style run configuration.

Sections ``[vit]``, ``[cnn]``, ``[train]`` and ``[data]`` map onto
:class:`VitConfig`, :class:`CnnConfig`, :class:`TrainConfig` and
:class:`SyntheticSpec`; every dataclass field is a key.  Tuples are written
comma-separated.  Overrides use ``section.key=value`` or a bare ``key=value``
when the key name is unique across sections.
"""

from __future__ import annotations

import configparser
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from .backbones import CnnConfig, VitConfig
from .data import SyntheticSpec
from .exceptions import ConfigError
from .training import TrainConfig

SECTIONS = {"vit": VitConfig, "cnn": CnnConfig, "train": TrainConfig, "data": SyntheticSpec}


@dataclass(frozen=True)
class RunConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)


def _default(cls, name):
    for f in fields(cls):
        if f.name == name:
            if f.default is not MISSING:
                return f.default
            if f.default_factory is not MISSING:  # type: ignore[misc]
                return f.default_factory()  # type: ignore[misc]
            return None
    raise ConfigError(f"unknown key {name!r} for {cls.__name__}")


def _coerce(cls, name: str, raw: str):
    proto = _default(cls, name)
    raw = raw.strip()
    try:
        if isinstance(proto, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if proto and isinstance(proto[0], str):
                return tuple(items)
            if proto and isinstance(proto[0], int) and not isinstance(proto[0], bool):
                return tuple(int(s) for s in items)
            return tuple(float(s) for s in items)
    except ValueError:
        raise ConfigError(f"{cls.__name__}.{name}: cannot parse {raw!r}") from None
    return raw


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    cls = SECTIONS[section]
    value = _coerce(cls, key, raw)
    try:
        return replace(cfg, **{section: replace(getattr(cfg, section), **{key: value})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}={raw!r}: {exc}") from exc


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg = _apply(cfg, section, key, raw)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def apply_override(cfg: RunConfig, item: str) -> RunConfig:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip().replace("-", "_")
    if "." in key:
        section, key = key.split(".", 1)
        return _apply(cfg, section, key, raw)
    owners = [s for s, cls in SECTIONS.items() if key in {f.name for f in fields(cls)}]
    if len(owners) != 1:
        raise ConfigError(f"key {key!r} is {'ambiguous' if owners else 'unknown'}; use section.key")
    return _apply(cfg, owners[0], key, raw)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
