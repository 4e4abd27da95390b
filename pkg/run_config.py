"""
Run configuration: every module config in one KEY=VALUE file.

Keys are <SECTION>_<FIELD> in upper case, for example:

    TRAIN_CYCLES=10
    TRAIN_PATCH_SHAPE=16,16,16
    FUSION_OFFSET_PERCENT=33

The file is parsed with python-dotenv; environment settings (ROI_LOC_THREADS,
ROI_LOC_LOG_LEVEL, ROI_LOC_RUN_DB) come from the process environment or a
local .env file.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from fusion import FusionConfig
from imitation_oracle import OracleConfig
from inference import InferenceConfig
from ssl_driver import SslConfig
from train_loop import TrainConfig
from volume_store import PhantomConfig

# Environment settings from a local .env
load_dotenv()

SECTIONS = {
    "PHANTOM": "phantom",
    "ORACLE": "oracle",
    "TRAIN": "train",
    "INFER": "infer",
    "FUSION": "fusion",
    "SSL": "ssl",
}
SEEDED_SECTIONS = ("phantom", "train", "ssl")

DEFAULT_THREADS = 1
DEFAULT_LOG_LEVEL = "WARNING"
DEFAULT_RUN_DB = "runs.db"


class ConfigError(ValueError):
    """Raised on unknown keys or values that cannot be parsed."""


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ssl: SslConfig = field(default_factory=SslConfig)

    def validate(self):
        self.phantom.validate()
        self.oracle.validate()
        self.train.validate()
        self.fusion.validate()
        self.ssl.validate(self.fusion)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            items = [v.strip() for v in raw.split(",")]
            if default and isinstance(default[0], float):
                return tuple(float(v) for v in items)
            return tuple(int(float(v)) if float(v).is_integer() else float(v) for v in items)
        return raw
    except ValueError:
        raise ConfigError(f"❌ Cannot parse {key}={raw!r} (expected {type(default).__name__})")


def apply_values(config: RunConfig, values: Mapping[str, Optional[str]]) -> RunConfig:
    sections = {name: getattr(config, name) for name in SECTIONS.values()}
    for key, raw in values.items():
        if raw is None:
            continue
        prefix, _, field_name = key.upper().partition("_")
        section = SECTIONS.get(prefix)
        if section is None:
            raise ConfigError(f"❌ Unknown config key: {key}")
        current = sections[section]
        names = {f.name.upper(): f.name for f in fields(current)}
        if field_name not in names:
            raise ConfigError(f"❌ Unknown config key: {key}")
        name = names[field_name]
        sections[section] = replace(current, **{name: _parse_value(key, raw, getattr(current, name))})
    return RunConfig(**sections)


def load_run_config(path=None, overrides: Optional[Mapping[str, str]] = None,
                    seed: Optional[int] = None) -> RunConfig:
    """Defaults <- config file <- --set overrides <- --seed."""
    config = RunConfig()
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"❌ Config file not found: {path}")
        config = apply_values(config, dotenv_values(path))
    if overrides:
        config = apply_values(config, overrides)
    if seed is not None:
        config = dataclasses.replace(
            config, **{name: replace(getattr(config, name), seed=int(seed)) for name in SEEDED_SECTIONS}
        )
    config.validate()
    return config


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_run_config(config: RunConfig) -> str:
    """KEY=VALUE text that load_run_config reads back to the same config."""
    lines = []
    for prefix, name in SECTIONS.items():
        section = getattr(config, name)
        for f in fields(section):
            lines.append(f"{prefix}_{f.name.upper()}={_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def parse_overrides(pairs) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"❌ Override must be KEY=VALUE, got {pair!r}")
        overrides[key.strip()] = value
    return overrides


def threads_from_env() -> int:
    raw = os.getenv("ROI_LOC_THREADS", str(DEFAULT_THREADS))
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"❌ ROI_LOC_THREADS must be an integer, got {raw!r}")


def log_level_from_env() -> int:
    name = os.getenv("ROI_LOC_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.WARNING


def run_db_from_env() -> str:
    return os.getenv("ROI_LOC_RUN_DB", DEFAULT_RUN_DB)
