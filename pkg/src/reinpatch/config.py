"""Flat ``section.key = value`` run configuration.

Strings are double-quoted, numbers bare, booleans ``true``/``false``; full
lines starting with ``#`` are comments. Every field of the data, policy,
backbone, and train config dataclasses is addressable, and command-line
``--set section.key=value`` overrides take precedence over file entries.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .policy import PolicyConfig
from .trainer import TrainConfig

__all__ = [
    "ConfigError",
    "DataConfig",
    "RunConfig",
    "parse_value",
    "parse_config_text",
    "load_config_file",
    "apply_overrides",
    "build_run_config",
]

_INT_RE = re.compile(r"^[+-]?\d+$")
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    """Dataset selection and windowing for CLI runs.

    When ``csv`` is empty a piecewise-constant synthetic series is generated
    from the ``synth_*`` fields.
    """

    csv: str = ""
    lookback: int = 96
    horizon: int = 96
    stride: int = 1
    split_mode: str = "ratio"
    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2
    synth_segments: int = 120
    synth_len_min: int = 10
    synth_len_max: int = 30
    synth_noise: float = 0.1
    synth_seed: int = 0

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    policy: PolicyConfig
    backbone: BackboneConfig
    train: TrainConfig


_SECTIONS = {
    "data": DataConfig,
    "policy": PolicyConfig,
    "backbone": BackboneConfig,
    "train": TrainConfig,
}


def parse_value(text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        return text[1:-1]
    if text in ("true", "false"):
        return text == "true"
    if _INT_RE.match(text):
        return int(text)
    if _FLOAT_RE.match(text):
        return float(text)
    raise ConfigError(f"cannot parse value {text!r}")


def parse_config_text(text: str) -> dict[str, object]:
    mapping: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        try:
            mapping[key] = parse_value(value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}", key=key) from None
    return mapping


def load_config_file(path: str | Path) -> dict[str, object]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def apply_overrides(
    mapping: dict[str, object], overrides: list[str]
) -> dict[str, object]:
    out = dict(mapping)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, _, value = item.partition("=")
        out[key.strip()] = parse_value(value)
    return out


def build_run_config(mapping: dict[str, object]) -> RunConfig:
    """Validate keys against the config dataclasses and build them all.

    The backbone's lookback/horizon default to the data section's values
    unless set explicitly, and a conflict between the two is an error.
    """
    per_section: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for key, value in mapping.items():
        if "." not in key:
            raise ConfigError(f"key {key!r} must be section.key", key=key)
        section, _, field_name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}", key=key)
        cls = _SECTIONS[section]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if field_name not in fields:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        ftype = fields[field_name].type
        if ftype in ("int", int) and isinstance(value, bool):
            raise ConfigError(f"key {key!r} expects an integer", key=key)
        if ftype in ("int", int) and not isinstance(value, int):
            raise ConfigError(f"key {key!r} expects an integer", key=key)
        if ftype in ("float", float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"key {key!r} expects a number", key=key)
            value = float(value)
        if ftype in ("str", str) and not isinstance(value, str):
            raise ConfigError(f"key {key!r} expects a quoted string", key=key)
        if ftype in ("bool", bool) and not isinstance(value, bool):
            raise ConfigError(f"key {key!r} expects true/false", key=key)
        per_section[section][field_name] = value

    data_kwargs = per_section["data"]
    backbone_kwargs = per_section["backbone"]
    try:
        data = DataConfig(**data_kwargs)
        for name in ("lookback", "horizon"):
            if name in backbone_kwargs:
                if backbone_kwargs[name] != getattr(data, name):
                    raise ConfigError(
                        f"backbone.{name} conflicts with data.{name}",
                        key=f"backbone.{name}",
                    )
            else:
                backbone_kwargs[name] = getattr(data, name)
        policy_kwargs = per_section["policy"]
        if "context_limit" not in policy_kwargs:
            policy_kwargs["context_limit"] = max(
                data.lookback, PolicyConfig.context_limit
            )
        return RunConfig(
            data=data,
            policy=PolicyConfig(**policy_kwargs),
            backbone=BackboneConfig(**backbone_kwargs),
            train=TrainConfig(**per_section["train"]),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
