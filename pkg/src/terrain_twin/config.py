"""Layered ``key = value`` configuration: defaults < config file < flags."""
from __future__ import annotations

import os
from dataclasses import fields

from .labeler import LabelerConfig, Thresholds
from .nnet import UNetConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "world.seed": 0,
    "world.width": 2048,
    "world.height": 1024,
    "world.octaves": 6,
    "world.persistence": 0.5,
    "world.sea_level_bias": -0.05,
    "world.lat_max": 80.0,
    "world.cell_size": 250.0,
    "tiler.tile_size": 256,
    "tiler.normalize": True,
}
for _f in fields(SamplerConfig):
    DEFAULTS[f"sampler.{_f.name}"] = _f.default
for _f in fields(LabelerConfig):
    if _f.name != "thresholds":
        DEFAULTS[f"labeler.{_f.name}"] = _f.default
for _f in fields(Thresholds):
    DEFAULTS[f"labeler.{_f.name}"] = _f.default
for _f in fields(UNetConfig):
    DEFAULTS[f"unet.{_f.name}"] = _f.default
for _f in fields(TrainConfig):
    DEFAULTS[f"train.{_f.name}"] = _f.default

# keys whose default is None but which hold integers when set
_OPTIONAL_INT = {"train.early_stop_patience"}


def parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    if key in _OPTIONAL_INT:
        return None if text.lower() in ("", "none") else int(text)
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def resolve(config_file: str | os.PathLike | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, an optional file and flag overrides, then validate."""
    cfg = dict(DEFAULTS)
    if config_file is not None:
        with open(config_file, encoding="utf-8") as fh:
            cfg.update(parse_config_text(fh.read(), os.fspath(config_file)))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            cfg[key] = value
    validate(cfg)
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def sampler_config(cfg) -> SamplerConfig:
    return SamplerConfig(**_section(cfg, "sampler"))


def labeler_config(cfg) -> LabelerConfig:
    sec = _section(cfg, "labeler")
    tnames = {f.name for f in fields(Thresholds)}
    thresholds = Thresholds(**{k: v for k, v in sec.items() if k in tnames})
    return LabelerConfig(thresholds=thresholds, **{k: v for k, v in sec.items() if k not in tnames})


def unet_config(cfg) -> UNetConfig:
    return UNetConfig(**_section(cfg, "unet"))


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**_section(cfg, "train"))


def validate(cfg: dict) -> None:
    try:
        sampler_config(cfg).validate()
        labeler_config(cfg).validate()
        unet_config(cfg).validate()
        train_config(cfg).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["world.width"] < 2 or cfg["world.height"] < 2:
        raise ConfigError("world dimensions must be >= 2")
    if cfg["world.octaves"] < 1:
        raise ConfigError("world.octaves must be >= 1")
    if not 0 < cfg["world.persistence"] < 1:
        raise ConfigError("world.persistence must lie in (0, 1)")
    if not 0 < cfg["world.lat_max"] < 90:
        raise ConfigError("world.lat_max must lie in (0, 90)")
    if cfg["world.cell_size"] <= 0:
        raise ConfigError("world.cell_size must be positive")
    if cfg["tiler.tile_size"] < 1:
        raise ConfigError("tiler.tile_size must be >= 1")


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in sorted(cfg.items()))


def worker_count() -> int:
    """Worker cap from TERRAIN_TWIN_THREADS; 0 or unset means one per CPU."""
    raw = os.environ.get("TERRAIN_TWIN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TERRAIN_TWIN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("TERRAIN_TWIN_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)
