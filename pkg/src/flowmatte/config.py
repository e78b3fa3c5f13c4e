"""Nested YAML configuration: packaged defaults, user overrides, resolved snapshots."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import yaml

from .codec import CodecConfig
from .denoiser import DenoiserConfig
from .losses import LossWeights
from .metrics import MetricScales
from .training import STAGES, StageConfig, StageConfigError, stage_from_dict

# mappings under these keys replace the default instead of merging into it
REPLACE_KEYS = frozenset({"mixture"})


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    text = resources.files("flowmatte").joinpath("configs/desk.yaml").read_text()
    return yaml.safe_load(text)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in REPLACE_KEYS:
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> dict:
    """``a.b.c=value`` (value parsed as YAML) to a nested mapping."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    try:
        cur[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from exc
    return node


def load_config(path=None, overrides: Iterable[str] = (), base: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(base) if base is not None else default_config()
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = deep_merge(cfg, user)
    for item in overrides:
        cfg = deep_merge(cfg, parse_override(item))
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        codec_config(cfg)
        denoiser_config(cfg)
        loss_weights(cfg)
        metric_scales(cfg)
        for name in STAGES:
            if name in cfg.get("stages", {}):
                s = stage_config(cfg, name)
                s.validate()
                missing = set(s.mixture) - set(cfg["data"]["datasets"])
                if missing:
                    raise ConfigError(f"{name}: mixture names unknown datasets {sorted(missing)}")
        if cfg["data"].get("test_split") not in cfg["data"]["datasets"]:
            raise ConfigError("data.test_split must name a dataset")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, StageConfigError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def codec_config(cfg: dict) -> CodecConfig:
    return CodecConfig(**cfg["codec"])


def denoiser_config(cfg: dict) -> DenoiserConfig:
    c = codec_config(cfg)
    return DenoiserConfig(latent_channels=c.latent_channels, cond_channels=c.latent_channels, **cfg["denoiser"])


def loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(**cfg["loss"])


def metric_scales(cfg: dict) -> MetricScales:
    return MetricScales(**cfg.get("evaluation", {}).get("metrics", {}))


def stage_config(cfg: dict, name: str) -> StageConfig:
    d = dict(cfg["stages"][name])
    opt = cfg.get("optimizer", {})
    d.setdefault("betas", opt.get("betas", (0.9, 0.999)))
    d.setdefault("weight_decay", opt.get("weight_decay", 0.01))
    return stage_from_dict(name, d, cfg.get("lora"))


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_snapshot(cfg: dict, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path
