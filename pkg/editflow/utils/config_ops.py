"""Flat `section.key = value` run configs, read with python-dotenv and validated by pydantic."""
import hashlib
import logging
import os
from typing import Dict, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from editflow.schemas.config_schemas import PRESETS, RunConfig
from editflow.structures import ConfigError

logger = logging.getLogger(__name__)

SECTIONS = tuple(RunConfig.model_fields)


def load_environment() -> None:
    """Pull EDITFLOW_* defaults from a .env file, without overriding the real environment."""
    load_dotenv(override=False)


def output_dir_default() -> str:
    return os.getenv("EDITFLOW_OUTPUT_DIR", "output")


def cache_dir_for(output_dir: str) -> str:
    return os.getenv("EDITFLOW_CACHE_DIR") or os.path.join(output_dir, ".editflow_cache")


def log_level() -> str:
    return os.getenv("EDITFLOW_LOG_LEVEL", "INFO").upper()


def nest(flat: Dict[str, Optional[str]]) -> Dict[str, Dict[str, str]]:
    """{"train.steps": "10"} -> {"train": {"steps": "10"}}. Empty values are dropped."""
    nested: Dict[str, Dict[str, str]] = {}
    for key, value in flat.items():
        section, dot, field = key.partition(".")
        if not dot or not field:
            raise ConfigError(f"Config key {key!r} is not of the form section.key")
        if section not in SECTIONS:
            raise ConfigError(f"Unknown config section {section!r} in key {key!r}")
        if value is None or value == "":
            continue
        nested.setdefault(section, {})[field] = value
    return nested


def merge(base: Dict, override: Dict) -> Dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section, values in override.items():
        out.setdefault(section, {}).update(values)
    return out


def parse_config(flat: Dict[str, Optional[str]], preset: Optional[str] = None) -> RunConfig:
    """Validate a flat mapping. Unknown keys and bad values raise ConfigError."""
    nested = nest(flat)
    preset = preset or nested.get("run", {}).pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        nested = merge(PRESETS[preset]().model_dump(exclude_none=True), nested)
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Read a config file (or none, for all defaults) and apply `section.key` overrides on top."""
    flat: Dict[str, Optional[str]] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        flat.update(dotenv_values(path))
    flat.update(overrides or {})
    return parse_config(flat)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()
