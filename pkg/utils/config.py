#!/usr/bin/env python3
"""
Centralized Configuration Module
Single source of truth for simulator settings, environment variables and config files.
"""

import os
from typing import Dict, Any, Optional
from dataclasses import dataclass, asdict
from datetime import datetime, timezone
from pathlib import Path

from dotenv import load_dotenv

from utils.errors import TraceIoError, ValidationError

load_dotenv()


@dataclass
class SimSettings:
    """Environment-driven defaults."""

    seed: Optional[int]
    jobs: int
    log_level: str
    debug_checks: bool
    output_dir: str


@dataclass
class EnvSetting:
    """One environment variable the simulator reads."""

    key_name: str
    description: str
    default: Optional[str] = None


ENV_SETTINGS = {
    "seed": EnvSetting("MOE_SIM_SEED", "Default seed for commands that draw random numbers"),
    "jobs": EnvSetting("MOE_SIM_JOBS", "Default worker threads for sweeps", "1"),
    "log_level": EnvSetting("MOE_SIM_LOG_LEVEL", "Logging level", "INFO"),
    "debug_checks": EnvSetting(
        "MOE_SIM_DEBUG_CHECKS", "Assert placement invariants after every step", "1"
    ),
    "output_dir": EnvSetting("MOE_SIM_OUTPUT_DIR", "Default output directory", "."),
}

_TRUTHY = {"1", "true", "yes", "on"}
LOG_LEVELS = ("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG")


def _parse_int(name: str, raw: Optional[str]) -> Optional[int]:
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw.strip())
    except ValueError:
        raise ValidationError(f"{name} must be an integer, got {raw!r}")


def check_log_level(name: str, raw: str) -> str:
    level = raw.strip().upper()
    if level not in LOG_LEVELS:
        raise ValidationError(f"{name} must be one of {', '.join(LOG_LEVELS)}, got {raw!r}")
    return level


class ConfigManager:
    """Centralized configuration manager."""

    def __init__(self):
        self._settings: Optional[SimSettings] = None

    @property
    def settings(self) -> SimSettings:
        """Environment settings, read on first use so bad values surface as ValidationError."""
        if self._settings is None:
            self._settings = self._read_environment()
        return self._settings

    def _read_environment(self) -> SimSettings:
        def env(name: str) -> Optional[str]:
            setting = ENV_SETTINGS[name]
            return os.getenv(setting.key_name, setting.default)

        jobs = _parse_int(ENV_SETTINGS["jobs"].key_name, env("jobs")) or 1
        return SimSettings(
            seed=_parse_int(ENV_SETTINGS["seed"].key_name, env("seed")),
            jobs=max(1, jobs),
            log_level=check_log_level(
                ENV_SETTINGS["log_level"].key_name, env("log_level") or "INFO"
            ),
            debug_checks=(env("debug_checks") or "").strip().lower() in _TRUTHY,
            output_dir=env("output_dir") or ".",
        )

    def reload(self) -> None:
        """Drop cached settings; the next access re-reads the environment (tests patch env vars)."""
        self._settings = None

    def load_config_file(self, path: str) -> Dict[str, str]:
        """Read an optional key=value config file; keys are normalized to snake_case."""
        values: Dict[str, str] = {}
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise TraceIoError(f"Cannot read config file {path}: {e}")

        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
        return values

    def resolve(
        self, flags: Dict[str, Any], config_file: Optional[str] = None
    ) -> Dict[str, Any]:
        """Merge config file values under explicitly given flags (flags win)."""
        merged: Dict[str, Any] = {}
        if config_file:
            merged.update(self.load_config_file(config_file))
        for key, value in flags.items():
            if value is not None:
                merged[key] = value
        return merged

    def default_seed(self, explicit: Optional[int]) -> Optional[int]:
        """Flag seed if given, else MOE_SIM_SEED."""
        return explicit if explicit is not None else self.settings.seed

    def get_config_summary(self) -> Dict[str, Any]:
        """Get resolved settings for manifests and diagnostics."""
        return {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "settings": asdict(self.settings),
            "environment": {
                name: {
                    "key": setting.key_name,
                    "set": setting.key_name in os.environ,
                    "description": setting.description,
                }
                for name, setting in ENV_SETTINGS.items()
            },
        }


# Global instance
config_manager = ConfigManager()


# Convenience functions
def debug_checks_enabled() -> bool:
    return config_manager.settings.debug_checks


def get_config_summary() -> Dict[str, Any]:
    """Get configuration summary."""
    return config_manager.get_config_summary()
