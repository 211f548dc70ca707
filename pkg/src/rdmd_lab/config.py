"""
Experiment document: a JSON file with one object per section.

Missing keys take their defaults; unknown keys are rejected with a close-match
suggestion. ``seed`` at top level seeds every section that does not set its own.
"""
from __future__ import annotations

import copy
import dataclasses
import difflib
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from rdmd_lab.diffusion import DsmConfig
from rdmd_lab.errors import ConfigError, ValidationError
from rdmd_lab.files import write_text
from rdmd_lab.networks import NetConfig
from rdmd_lab.oracles import OMEGA_MODES as SURFACE_OMEGAS
from rdmd_lab.schedule import NoiseSchedule
from rdmd_lab.trainer import RdmdConfig

log = logging.getLogger(__name__)

RESOLVED_NAME = "resolved_config.json"
DIST_KINDS = ("gaussian", "8gaussians")


@dataclass(frozen=True)
class DataConfig:
    source: str = "gaussian"
    target: str = "8gaussians"
    dim: int = 2
    source_std: float = 1.0
    target_std: float = 1.5
    radius: float = 10.0
    component_std: float = 0.5
    # fixed training set size; null draws fresh samples every batch
    n_samples: int | None = 5000

    def __post_init__(self) -> None:
        for key in ("source", "target"):
            if getattr(self, key) not in DIST_KINDS:
                raise ValidationError(f"data.{key} must be one of {DIST_KINDS}, got {getattr(self, key)!r}")
        if self.n_samples is not None and self.n_samples < 1:
            raise ValidationError(f"data.n_samples must be >= 1 or null, got {self.n_samples}")
        if min(self.source_std, self.target_std, self.radius, self.component_std) <= 0:
            raise ValidationError("data: stds and radius must be > 0")


@dataclass(frozen=True)
class EvalConfig:
    n_eval: int = 5000
    n_projections: int = 128
    crossing_m: int = 200
    ode_steps: int = 64
    score_sigmas: tuple[float, ...] = (0.1, 1.0, 10.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "score_sigmas", tuple(float(s) for s in self.score_sigmas))
        if self.n_eval < 1 or self.n_projections < 1:
            raise ValidationError("eval: n_eval and n_projections must be >= 1")
        if self.crossing_m < 2:
            raise ValidationError(f"eval.crossing_m must be >= 2, got {self.crossing_m}")
        if self.ode_steps < 2:
            raise ValidationError(f"eval.ode_steps must be >= 2, got {self.ode_steps}")


@dataclass(frozen=True)
class SurfaceConfig:
    r_min: float = 0.5
    r_max: float = 2.5
    alpha_min: float = -math.pi
    alpha_max: float = math.pi
    grid_n: int = 64
    lambdas: tuple[float, ...] = (0.0, 0.2)
    target_std: float = 1.5
    omega: str = "uniform"
    quadrature_steps: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if self.grid_n < 8:
            raise ValidationError(f"surface.grid_n must be >= 8, got {self.grid_n}")
        if not (0 < self.r_min < self.r_max):
            raise ValidationError(f"surface: need 0 < r_min < r_max, got [{self.r_min}, {self.r_max}]")
        if not self.alpha_min < self.alpha_max:
            raise ValidationError(f"surface: empty alpha range [{self.alpha_min}, {self.alpha_max}]")
        if not self.lambdas or min(self.lambdas) < 0:
            raise ValidationError("surface.lambdas must be a non-empty list of values >= 0")
        if self.omega not in SURFACE_OMEGAS:
            raise ValidationError(f"surface.omega must be one of {SURFACE_OMEGAS}, got {self.omega!r}")
        if self.quadrature_steps < 16:
            raise ValidationError(f"surface.quadrature_steps must be >= 16, got {self.quadrature_steps}")


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[float, ...] = (0.0, 0.05, 0.2, 1.0)
    sigma_inits: tuple[float, ...] = (1.0,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "sigma_inits", tuple(float(v) for v in self.sigma_inits))
        if not self.lambdas or not self.sigma_inits:
            raise ValidationError("sweep: lambdas and sigma_inits must be non-empty")


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    network: NetConfig = field(default_factory=NetConfig)
    dsm: DsmConfig = field(default_factory=DsmConfig)
    rdmd: RdmdConfig = field(default_factory=RdmdConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


SECTIONS: dict[str, type] = {
    f.name: f.default_factory  # type: ignore[misc]
    for f in dataclasses.fields(ExperimentConfig)
    if f.name != "seed"
}
SEEDED_SECTIONS = ("dsm", "rdmd")


def _suggest(key: str, allowed) -> str:
    close = difflib.get_close_matches(key, list(allowed), n=1, cutoff=0.6)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _check_keys(where: str, given: dict, allowed) -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}{_suggest(key, allowed)}")


def _coerce(where: str, key: str, value: Any, default: Any, nullable: bool) -> Any:
    if value is None:
        if not nullable:
            raise ConfigError(f"{where}.{key} must not be null")
        return value
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be a boolean, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}.{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}.{key} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}.{key} must be a list, got {value!r}")
        return tuple(value)
    return value


def _build_section(name: str, raw: Any, seed: int) -> Any:
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object, got {type(raw).__name__}")
    defaults = cls()
    nullable = {f.name: "None" in str(f.type) for f in dataclasses.fields(cls)}
    _check_keys(f"section {name!r}", raw, nullable)
    kwargs = {key: _coerce(name, key, value, getattr(defaults, key), nullable[key]) for key, value in raw.items()}
    if name in SEEDED_SECTIONS and "seed" not in kwargs:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _check_keys("config", doc, {"seed", *SECTIONS})
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not (0 <= seed < 2 ** 64):
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    sections = {name: _build_section(name, doc.get(name, {}), seed) for name in SECTIONS}
    return ExperimentConfig(seed=seed, **sections)


def read_config_document(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read ``path`` (defaults only when None) and apply nested ``overrides``.

    A ``seed`` override reseeds every seeded section, including ones that set
    their own seed in the file.
    """
    doc = read_config_document(path)
    overrides = dict(overrides or {})
    if "seed" in overrides:
        for name in SEEDED_SECTIONS:
            if isinstance(doc.get(name), dict):
                doc[name] = {k: v for k, v in doc[name].items() if k != "seed"}
    cfg = config_from_dict(_merge(doc, overrides))
    log.debug("loaded config from %s (seed=%d)", path or "<defaults>", cfg.seed)
    return cfg


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(schedule: NoiseSchedule, network: NetConfig | None = None) -> str:
    """SHA-256 of the model-defining sections."""
    doc = {"schedule": schedule.to_dict(), "network": network.to_dict() if network is not None else None}
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def write_resolved_config(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    path = write_text(Path(out_dir) / RESOLVED_NAME, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)
    return path
