"""Run configuration: nested dataclasses loaded from JSON with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .errors import ConfigError
from .harness import HarnessConfig
from .pretrain import PretrainConfig
from .synth import PretrainCorpusConfig, SynthConfig
from .vad import VadParams


@dataclass(frozen=True)
class CorpusConfig:
    sessions: int = 10
    seed: int = 0
    pretrain_utterances: int = 2000
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain_corpus: PretrainCorpusConfig = field(default_factory=PretrainCorpusConfig)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    vad: VadParams = field(default_factory=VadParams)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)


def _coerce(tp, value, where: str):
    if isinstance(tp, str):
        raise ConfigError(f"{where}: unresolved type {tp}")
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return build(tp, value, where)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def build(cls, data: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from ``data``; missing keys keep their defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}{k}.") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return build(RunConfig, data)


def override(cfg, dotted: str, value: Any):
    """Return ``cfg`` with the field at ``dotted`` (e.g. ``pretrain.epochs``) replaced."""
    head, _, rest = dotted.partition(".")
    if not dataclasses.is_dataclass(cfg) or head not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown config key {dotted}")
    if rest:
        return replace(cfg, **{head: override(getattr(cfg, head), rest, value)})
    hint = typing.get_type_hints(type(cfg))[head]
    data = to_dict(cfg)
    data[head] = to_dict(value) if is_dataclass(value) else value
    return build(type(cfg), data) if not is_dataclass(hint) else replace(cfg, **{head: value})


def write_resolved(out_dir: str | Path, cfg: RunConfig, extra: dict | None = None) -> Path:
    """Write the resolved config (plus run facts such as seeds) as sorted JSON."""
    doc = {"config": to_dict(cfg)}
    doc.update(extra or {})
    path = Path(out_dir) / "config.resolved.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
