"""Run configuration: INI-style file, strict dotted overrides, digest.

Top-level keys (``lr``, ``epochs``, ...) sit before any section header;
nested blocks live under ``[backbone]``, ``[heads]``, ``[augment]`` and
``[data]``. Unknown keys are rejected everywhere.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

from .augment import AugmentPolicy, format_ops, parse_ops
from .backbones import BackboneConfig
from .model import HeadConfig

__all__ = ["ConfigError", "DataConfig", "RunConfig", "load_config", "parse_config", "apply_overrides"]

DEFAULT_AUGMENT = "hflip:0.5, vflip:0.5, rotate90:0.5"
# these never change the trained weights, so a resumed run may alter them
DIGEST_EXCLUDES = ("epochs", "score_threshold", "mask_threshold", "data")


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message)


@dataclass
class DataConfig:
    train_annotations: str = ""
    train_images: str = ""
    val_annotations: str = ""
    val_images: str = ""
    max_size: int = 0  # longer image side after resizing; 0 keeps native size


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    augment: AugmentPolicy = field(default_factory=lambda: AugmentPolicy(parse_ops(DEFAULT_AUGMENT)))
    data: DataConfig = field(default_factory=DataConfig)
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 100
    batch_size: int = 2
    score_threshold: float = 0.5
    mask_threshold: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}", "lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}", "momentum")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}", "weight_decay")
        for k in ("score_threshold", "mask_threshold"):
            if not 0 <= getattr(self, k) <= 1:
                raise ConfigError(f"{k} must lie in [0, 1]", k)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}", "dtype")

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, AugmentPolicy):
                d[f.name] = {"ops": format_ops(v.ops), "seed": v.seed}
            elif dataclasses.is_dataclass(v):
                d[f.name] = {g.name: _plain(getattr(v, g.name)) for g in dataclasses.fields(v)}
            else:
                d[f.name] = v
        return d

    def to_ini(self) -> str:
        d = self.to_dict()
        lines = [f"{k} = {_fmt(v)}" for k, v in d.items() if not isinstance(v, dict)]
        for k, v in d.items():
            if isinstance(v, dict):
                lines.append("")
                lines.append(f"[{k}]")
                lines.extend(f"{kk} = {_fmt(vv)}" for kk, vv in v.items())
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in DIGEST_EXCLUDES}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}", key) from None


def _build(raw: dict) -> RunConfig:
    """``raw`` maps dotted keys to strings; everything else keeps its default."""
    base = RunConfig.__new__(RunConfig)
    defaults = {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
                for f in dataclasses.fields(RunConfig)}
    sections = {k: v for k, v in defaults.items() if dataclasses.is_dataclass(v)}
    top = {}
    nested = {name: {} for name in sections}
    for key, text in raw.items():
        head, _, tail = key.partition(".")
        if tail:
            if head not in sections:
                raise ConfigError(f"unknown config section {head!r} in key {key!r}", key)
            sub = sections[head]
            if isinstance(sub, AugmentPolicy):
                if tail == "ops":
                    try:
                        nested[head]["ops"] = parse_ops(text)
                    except ValueError as exc:
                        raise ConfigError(f"augment.ops: {exc}", key) from None
                    continue
                if tail != "seed":
                    raise ConfigError(f"unknown config key {key!r}", key)
                nested[head]["seed"] = _convert(text, 0, key)
                continue
            names = {f.name for f in dataclasses.fields(sub)}
            if tail not in names:
                raise ConfigError(f"unknown config key {key!r}", key)
            nested[head][tail] = _convert(text, getattr(sub, tail), key)
        else:
            if head not in defaults or head in sections:
                raise ConfigError(f"unknown config key {key!r}", key)
            top[head] = _convert(text, defaults[head], key)
    kwargs = dict(top)
    try:
        for name, sub in sections.items():
            kwargs[name] = dataclasses.replace(sub, **nested[name]) if nested[name] else sub
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _flatten_ini(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    raw = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            raw[key if section == "__top__" else f"{section}.{key}"] = value
    return raw


def parse_config(text: str = "", overrides: Iterable[str] = ()) -> RunConfig:
    raw = _flatten_ini(text)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value", item)
        raw[key.strip()] = value
    return _build(raw)


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    text = open(path, encoding="utf-8").read() if path else ""
    return parse_config(text, overrides)


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    return parse_config(cfg.to_ini(), overrides)
