"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Lists are comma separated.
Regimes of the synthetic generator use indexed keys such as
``regime0.eigenvalues = 0.3, 0.5``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
from pathlib import Path

from .data_io import Regime, SynthConfig
from .networks import ModelConfig
from .objective import LossConfig
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    pass


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load(path) -> dict[str, str]:
    path = Path(path)
    try:
        return parse_text(path.read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest() if path else hashlib.sha256(b"").hexdigest()


def _convert(raw: str, kind, key: str):
    try:
        if kind is bool or kind == "bool":
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def _fill(cls, values: dict[str, str], skip=()):
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key in skip:
            continue
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _convert(raw, kinds[key], key)
    return kwargs


_LOSS_KEYS = ("tau", "sigma_p2", "sigma_q2", "sigma_gamma2")
_MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))


def pretrain_configs(values: dict[str, str]) -> tuple[PretrainConfig, ModelConfig]:
    """Split one flat mapping into training and model configuration.

    ``preset = desk`` (default) or ``full`` selects the base values.
    """
    values = dict(values)
    preset = values.pop("preset", "desk")
    if preset not in ("desk", "full"):
        raise ConfigError(f"unknown preset {preset!r}")
    loss_vals = {k: float(_convert(values.pop(k), float, k)) for k in _LOSS_KEYS if k in values}
    model_vals = {k: values.pop(k) for k in _MODEL_KEYS if k in values}
    tau = loss_vals.pop("tau", 0.01)
    try:
        loss = LossConfig.from_tau(tau, **loss_vals)
        train_kwargs = _fill(PretrainConfig, values, skip=("loss",))
        cfg = PretrainConfig.desk(loss=loss, **train_kwargs) if preset == "desk" \
            else PretrainConfig(loss=loss, **train_kwargs)
        model = ModelConfig(**_fill(ModelConfig, model_vals))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, model


_REGIME = re.compile(r"regime(\d+)\.(eigenvalues|control_bias|emission_seed)$")


def synth_config(values: dict[str, str]) -> tuple[SynthConfig, int]:
    """Generator configuration and seed (``seed`` key, default 0)."""
    values = dict(values)
    seed = int(_convert(values.pop("seed", "0"), int, "seed"))
    regimes: dict[int, dict] = {}
    for key in [k for k in values if _REGIME.match(k)]:
        idx, field = _REGIME.match(key).groups()
        raw = values.pop(key)
        regimes.setdefault(int(idx), {})[field] = \
            int(_convert(raw, int, key)) if field == "emission_seed" else _convert(raw, "floats", key)
    kwargs = _fill(SynthConfig, values, skip=("regimes",))
    if "class_balance" in kwargs:
        kwargs["class_balance"] = _convert(values["class_balance"], "floats", "class_balance")
    try:
        if regimes:
            kwargs["regimes"] = [Regime(**regimes[i]) for i in sorted(regimes)]
        return SynthConfig(**kwargs), seed
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
