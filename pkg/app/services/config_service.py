# app/services/config_service.py
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import yaml
from pydantic import ValidationError

from app.errors import ConfigError
from app.models import SWEEPABLE, TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = tuple(TrainConfig.model_fields)
# sweepable names accepted without their section prefix
SHORT_NAMES = {name: f"loss.{name}" for name in SWEEPABLE}


def flatten(tree: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested sections -> {"section.key": value}; leaves are non-mapping values."""
    flat: Dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def unflatten(flat: Mapping[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for dotted, value in flat.items():
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config key {dotted!r} conflicts with a scalar value")
        node[parts[-1]] = value
    return tree


def _normalise(raw: Mapping[str, Any]) -> Dict[str, Any]:
    # dotted top-level keys ("loss.mu_c: 0.5") are folded back into sections
    if any("." in str(key) for key in raw):
        return unflatten(flatten(raw))
    return dict(raw)


def build_config(raw: Mapping[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.model_validate(_normalise(raw or {}))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from None


def load_config(config_path: Union[str, Path]) -> TrainConfig:
    """Read and validate a YAML experiment config; unknown keys are rejected."""
    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found at {config_path}")
    try:
        with open(config_path, "r") as file:
            raw = yaml.safe_load(file)
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {config_path} is not valid YAML: {e}") from None
    if raw is not None and not isinstance(raw, Mapping):
        raise ConfigError(f"Config file {config_path} must hold a mapping of sections")
    config = build_config(raw or {})
    logger.info(f"Loaded configuration from {config_path}")
    return config


def to_dict(config: TrainConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")


def dump_config(config: TrainConfig, path: Union[str, Path, None] = None) -> str:
    text = yaml.safe_dump(to_dict(config), sort_keys=True, default_flow_style=None)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    return text


def resolve_key(name: str) -> str:
    dotted = SHORT_NAMES.get(name, name)
    if dotted not in flatten(to_dict(TrainConfig())):
        raise ConfigError(f"unknown config key {name!r}")
    return dotted


def with_overrides(config: TrainConfig, overrides: Mapping[str, Any]) -> TrainConfig:
    """Copy of ``config`` with dotted keys replaced, re-validated as a whole."""
    flat = flatten(to_dict(config))
    for name, value in overrides.items():
        flat[resolve_key(name)] = value
    return build_config(unflatten(flat))
