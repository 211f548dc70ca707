from __future__ import annotations
import os
from dataclasses import dataclass

from dotenv import load_dotenv

from rdmd_lab.errors import ConfigError

def _get_bool(name: str, default: bool = False) -> bool:
    v = os.getenv(name)
    if v is None:
        return default
    return v.strip().lower() in {"1", "true", "yes", "on"}

def _get_int(name: str, default: int) -> int:
    v = os.getenv(name)
    if v is None or not v.strip():
        return default
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {v!r}") from None

@dataclass(frozen=True)
class Settings:
    config_path: str = "config.json"
    # overrides output.dir of the config file when set
    out_dir: str | None = None
    log_level: str = "INFO"
    # concurrent runs launched by the sweep command
    workers: int = 1
    # wallclock_ms stays 0 in loss logs unless enabled, so reruns are byte-identical
    record_wallclock: bool = False

def load_settings() -> Settings:
    load_dotenv()
    workers = _get_int("RDMD_WORKERS", 1)
    if workers < 1:
        raise ConfigError(f"RDMD_WORKERS must be >= 1, got {workers}")
    return Settings(
        config_path=os.getenv("RDMD_CONFIG", "config.json"),
        out_dir=os.getenv("RDMD_OUT_DIR") or None,
        log_level=os.getenv("RDMD_LOG_LEVEL", "INFO").upper(),
        workers=workers,
        record_wallclock=_get_bool("RDMD_RECORD_WALLCLOCK", False),
    )
