"""Layered experiment configuration.

Flat ``key = value`` text, one setting per line, ``#`` starts a comment.
Keys carry a section prefix (``train.temperature``); ``seed`` and
``workers`` are top level. Resolution order: defaults, then file, then
``--set`` overrides. Tuple values are comma separated (``episode.ways = 5,20``).
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .analysis import RetrievalSpec
from .data import AugmentationSpec, SyntheticSpec
from .encoder import EncoderConfig
from .experiments import (
    BENCHMARK_AUGMENTATION,
    BENCHMARK_DATA,
    BENCHMARK_ENCODER,
    BENCHMARK_TRAIN,
    CLI_EPISODE,
    LabelSpec,
)
from .fewshot import EpisodeConfig, FinetuneConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad config input; the message names the offending key."""


@dataclass(frozen=True)
class Paths:
    dataset: str = "dataset.txt"
    checkpoint: str = "checkpoint.bin"
    history: str = "history.csv"
    results: str = "results.csv"
    collapse: str = "collapse.txt"
    report: str = "report.txt"
    config: str = "config.txt"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    data: SyntheticSpec = BENCHMARK_DATA
    labels: LabelSpec = LabelSpec()
    aug: AugmentationSpec = BENCHMARK_AUGMENTATION
    encoder: EncoderConfig = BENCHMARK_ENCODER
    train: TrainConfig = BENCHMARK_TRAIN
    episode: EpisodeConfig = CLI_EPISODE
    finetune: FinetuneConfig = FinetuneConfig()
    retrieval: RetrievalSpec = RetrievalSpec()
    paths: Paths = field(default_factory=Paths)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def encoder_config(self) -> EncoderConfig:
        return replace(self.encoder, input_dim=self.data.input_dim)


SECTIONS = ("data", "labels", "aug", "encoder", "train", "episode", "finetune", "retrieval", "paths")
TOP_LEVEL = ("seed", "workers")
# derived from other keys, never set directly
_DERIVED = {("train", "seed"), ("encoder", "input_dim")}


def _hints(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _keys() -> dict[str, typing.Any]:
    out: dict[str, typing.Any] = {k: _hints(ExperimentConfig)[k] for k in TOP_LEVEL}
    for sec in SECTIONS:
        cls = _hints(ExperimentConfig)[sec]
        for f in fields(cls):
            if (sec, f.name) not in _DERIVED:
                out[f"{sec}.{f.name}"] = _hints(cls)[f.name]
    return out


def _parse_scalar(tp, text: str, key: str):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            if not text:
                raise ValueError
            return text
    except ValueError:
        raise ConfigError(f"{key}: expected {tp.__name__}, got {text!r}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def parse_value(tp, text: str, key: str):
    """Parse ``text`` as the annotated type ``tp``."""
    if typing.get_origin(tp) is tuple:
        args = typing.get_args(tp)
        parts = [p for p in text.split(",") if p.strip()] if text.strip() else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(args[0], p, key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(a, p, key) for a, p in zip(args, parts))
    return _parse_scalar(tp, text, key)


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> text`` pairs; later duplicates win, order preserved."""
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(
    file_settings: dict[str, str] | None = None,
    overrides: dict[str, str] | None = None,
    base: ExperimentConfig | None = None,
) -> ExperimentConfig:
    """Apply file settings then overrides on top of ``base`` (defaults)."""
    known = _keys()
    cfg = base or ExperimentConfig()
    merged = {**(file_settings or {}), **(overrides or {})}
    top: dict[str, typing.Any] = {}
    per_section: dict[str, dict[str, typing.Any]] = {}
    for key, text in merged.items():
        if key not in known:
            hint = " (derived from 'seed')" if key == "train.seed" else ""
            hint = hint or (" (derived from 'data.input_dim')" if key == "encoder.input_dim" else "")
            raise ConfigError(f"unknown config key {key!r}{hint}")
        value = parse_value(known[key], text, key)
        if "." in key:
            sec, name = key.split(".", 1)
            per_section.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    changes = dict(top)
    for sec, values in per_section.items():
        try:
            changes[sec] = replace(getattr(cfg, sec), **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{sec}: {exc}") from None
    cfg = replace(cfg, **changes)
    try:
        # re-validate cross-field constraints through the constructors
        cfg.train_config()
        cfg.encoder_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_overrides(items) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config(path=None, overrides=None, seed: int | None = None) -> ExperimentConfig:
    """Defaults < file at ``path`` < ``overrides`` (``key=value`` strings) < ``seed``."""
    file_settings = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {str(p)!r}: {exc.strerror}") from None
        file_settings = parse_lines(text.splitlines(), str(p))
    extra = parse_overrides(overrides)
    if seed is not None:
        extra["seed"] = str(seed)
    return resolve(file_settings, extra)


def to_lines(cfg: ExperimentConfig) -> list[str]:
    lines = [f"{k} = {format_value(getattr(cfg, k))}" for k in TOP_LEVEL]
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            if (sec, f.name) not in _DERIVED:
                lines.append(f"{sec}.{f.name} = {format_value(getattr(obj, f.name))}")
    return lines


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text("\n".join(to_lines(cfg)) + "\n", encoding="utf-8")

