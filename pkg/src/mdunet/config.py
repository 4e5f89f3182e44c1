"""Flat key = value configuration covering architecture, training, and
quantization options. Unknown keys are rejected with their line number;
omitted keys take the module defaults."""

from __future__ import annotations

from .graph import ArchConfig
from .quantize import QuantConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised for unparsable or invalid configuration text."""


def _parse_int(text):
    return int(text, 0)


def _parse_float(text):
    return float(text)


def _parse_str(text):
    return text


def _parse_int_list(text):
    return tuple(int(t.strip()) for t in text.split(",") if t.strip())


def _parse_float_list(text):
    return tuple(float(t.strip()) for t in text.split(",") if t.strip())


def _parse_dense(special):
    def parse(text):
        if text == special:
            return text
        return int(text)
    return parse


# key -> (config section, value parser)
_SCHEMA = {
    "depth": ("arch", _parse_int),
    "base_channels": ("arch", _parse_int),
    "num_classes": ("arch", _parse_int),
    "enc_dense": ("arch", _parse_dense("min")),
    "dec_dense": ("arch", _parse_dense("mout")),
    "cross_mode": ("arch", _parse_str),
    "upsample_mode": ("arch", _parse_str),
    "base_lr": ("train", _parse_float),
    "lr_milestones": ("train", _parse_int_list),
    "batch_size": ("train", _parse_int),
    "epochs": ("train", _parse_int),
    "seed": ("train", _parse_int),
    "loss": ("train", _parse_str),
    "iterations": ("train", _parse_int),
    "bits": ("quant", _parse_int),
    "schedule": ("quant", _parse_float_list),
    "partition_strategy": ("quant", _parse_str),
    "retrain_iterations": ("quant", _parse_int),
}


def parse_config(text: str) -> tuple[ArchConfig, TrainConfig, QuantConfig]:
    sections: dict[str, dict] = {"arch": {}, "train": {}, "quant": {}}
    key_lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in key_lines:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        section, parser = _SCHEMA[key]
        try:
            sections[section][key] = parser(value)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: cannot parse value {value!r} for key {key!r}"
            ) from None
        key_lines[key] = lineno

    def build(factory, kwargs):
        try:
            return factory(**kwargs)
        except (ValueError, RuntimeError) as exc:
            # blame the key mentioned first in the message ("depth" may
            # appear later in an enc_dense error, say)
            named = [k for k in kwargs if k in str(exc) and k in key_lines]
            if named:
                key = min(named, key=lambda k: str(exc).index(k))
                raise ConfigError(f"line {key_lines[key]}: {exc}") from None
            raise ConfigError(str(exc)) from None

    return (
        build(ArchConfig, sections["arch"]),
        build(TrainConfig, sections["train"]),
        build(QuantConfig, sections["quant"]),
    )
