"""Run configuration: ``key = value`` text with ``[model] [train] [synth] [paths]`` sections.

Example::

    [model]
    stages = 2
    input_size = 64, 64

    [train]
    epochs = 2

    [paths]
    data_dir = data/
    out_dir = runs/smoke

Unknown sections or keys are rejected.  ``--set section.key=value`` (or a
bare ``key=value`` when the key name is unique) overrides file values.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field

from .data import SynthSpec
from .errors import ConfigError
from .network import CpUnetConfig
from .train import TrainConfig

OUT_DIR_ENV = "CPUNET_OUT_DIR"


@dataclass
class Paths:
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint: str = ""
    synth_seed: int = 0


@dataclass
class RunConfig:
    model: CpUnetConfig = field(default_factory=CpUnetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: Paths = field(default_factory=Paths)


SECTIONS = ("model", "train", "synth", "paths")


def _parse_value(raw: str, annotation, where: str):
    raw = raw.strip()
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if origin is tuple:
            elem = typing.get_args(annotation)[0]
            parts = [p for p in raw.strip("()[] ").replace("x", ",").split(",") if p.strip()]
            return tuple(elem(p.strip()) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {annotation}") from None


def _field_types(obj) -> dict[str, object]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(obj)}


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    """Apply ``section.key`` (or a unique bare ``key``) from its string form."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
    else:
        owners = [s for s in SECTIONS if key in _field_types(getattr(cfg, s))]
        if not owners:
            raise ConfigError(f"unknown key {key!r}")
        if len(owners) > 1:
            raise ConfigError(f"key {key!r} is ambiguous; use one of {[f'{s}.{key}' for s in owners]}")
        section, name = owners[0], key
    target = getattr(cfg, section)
    types = _field_types(target)
    if name not in types:
        raise ConfigError(f"unknown key {name!r} in section [{section}]")
    setattr(target, name, _parse_value(raw, types[name], f"{section}.{name}"))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            set_value(cfg, f"{section}.{key}", raw)
    return cfg


def load_config(path: str | None = None, overrides: typing.Sequence[str] = (),
                env: typing.Mapping[str, str] | None = None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        parse_config_text(text, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        set_value(cfg, key.strip(), raw)
    env = os.environ if env is None else env
    if env.get(OUT_DIR_ENV):
        cfg.paths.out_dir = env[OUT_DIR_ENV]
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)
