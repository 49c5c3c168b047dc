"""Run configuration as INI text.

Grammar (parsed with :mod:`configparser`)::

    file     := section*
    section  := "[" name "]" NEWLINE (key "=" value NEWLINE)*
    name     := "model" | "train" | "data" | "pretrain" | "paths"
    value    := int | float | "true" | "false" | "none" | word | word ("," word)*

Keys are the field names of ``ModelConfig`` (model), ``TrainPlan`` (train),
``SyntheticTaskSpec`` (data), pretraining knobs (pretrain) and file paths
(paths). Unknown sections or keys are rejected. Lines starting with ``#`` or
``;`` are comments.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import SyntheticTaskSpec
from .model import ModelConfig
from .training import TrainPlan


@dataclass
class PretrainSettings:
    epochs: int = 5
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0


@dataclass
class Paths:
    backbone: Optional[str] = None


SECTIONS = {
    "model": ModelConfig,
    "train": TrainPlan,
    "data": SyntheticTaskSpec,
    "pretrain": PretrainSettings,
    "paths": Paths,
}


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainPlan = field(default_factory=TrainPlan)
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    paths: Paths = field(default_factory=Paths)

    def section(self, name: str):
        return getattr(self, name)

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            obj = self.section(name)
            for f in fields(obj):
                lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """``overrides`` maps ``(section, key)`` to raw strings or typed values."""
        grouped: dict = {}
        for (sec, key), value in overrides.items():
            grouped.setdefault(sec, {})[key] = value
        kwargs = {}
        for name, cls in SECTIONS.items():
            current = self.section(name)
            changes = grouped.pop(name, {})
            if not changes:
                kwargs[name] = current
                continue
            hints = _hints(cls)
            parsed = {}
            for key, value in changes.items():
                if key not in hints:
                    raise ConfigFileError(f"unknown key {name}.{key}")
                parsed[key] = parse_value(value, hints[key], f"{name}.{key}") if isinstance(value, str) else value
            try:
                kwargs[name] = dataclasses.replace(current, **parsed)
            except (TypeError, ValueError) as e:
                raise ConfigFileError(f"[{name}] {e}") from None
        if grouped:
            raise ConfigFileError(f"unknown section(s): {sorted(grouped)}")
        return RunConfig(**kwargs)


def _hints(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(raw: str, hint, where: str):
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if text.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple or typing.get_origin(hint) is tuple:
            return tuple(x.strip() for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigFileError(f"{where}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def load_config(path: Optional[str] = None, text: Optional[str] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    cp.optionxform = str
    try:
        if path is not None:
            if not Path(path).is_file():
                raise ConfigFileError(f"config file not found: {path}")
            cp.read_string(Path(path).read_text(encoding="utf-8"), source=str(path))
        elif text is not None:
            cp.read_string(text)
    except configparser.Error as e:
        raise ConfigFileError(str(e).replace("\n", " ")) from None
    overrides = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigFileError(f"unknown section [{sec}]")
        for key, value in cp.items(sec):
            overrides[(sec, key)] = value
    return RunConfig().with_overrides(overrides)
