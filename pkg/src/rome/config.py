"""Flat ``key = value`` run configuration.

Precedence is command-line overrides, then the config file, then defaults.
Unknown keys are rejected. The resolved echo written by every run can be fed
back as ``--config`` to reproduce it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .data import DataError, parse_key_values
from .trainer import ConfigError, TrainConfig

RUN_KEYS = {"data": "", "val_data": "", "split_gallery": 0, "vocab_size": 20, "feature_dim": 6,
            "tol": 1e-4, "h": 1e-5}
_TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def valid_keys() -> list[str]:
    return sorted(_TRAIN_DEFAULTS) + sorted(RUN_KEYS)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    extra: dict = field(default_factory=lambda: dict(RUN_KEYS))

    def __getattr__(self, name):
        extra = self.__dict__.get("extra", {})
        if name in extra:
            return extra[name]
        raise AttributeError(name)

    def to_text(self) -> str:
        items = list(self.train.as_dict().items()) + sorted(self.extra.items())
        return "".join(f"{k} = {v}\n" for k, v in items)


def _coerce(key: str, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {type(default).__name__}") from None


def resolve(values: Mapping[str, object], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    unknown = sorted(set(values) - set(_TRAIN_DEFAULTS) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {', '.join(valid_keys())}")
    train_vals = base.train.as_dict()
    extra = dict(base.extra)
    for key, raw in values.items():
        if key in _TRAIN_DEFAULTS:
            train_vals[key] = _coerce(key, raw, _TRAIN_DEFAULTS[key])
        else:
            extra[key] = _coerce(key, raw, RUN_KEYS[key])
    return RunConfig(TrainConfig(**train_vals), extra)


def load_run_config(path=None, overrides: Mapping[str, object] | None = None,
                    base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            cfg = resolve(parse_key_values(text, str(path)), cfg)
        except DataError as exc:
            raise ConfigError(str(exc)) from None
    if overrides:
        cfg = resolve(overrides, cfg)
    return cfg


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not KEY=VALUE")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


GRADCHECK_DEFAULTS = {"model_dim": 8, "heads": 2, "word_dim": 4, "batch_size": 3, "margin": 0.2,
                      "precision": "float64", "weighting": "both", "design": "mixed", "features": "split",
                      "ff_dim": 16, "vocab_size": 20, "feature_dim": 6, "seed": 0}
