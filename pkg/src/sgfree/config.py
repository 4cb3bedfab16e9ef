"""Flat JSON run configuration with strict key checking, plus output helpers."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .measures import (
    COMPRESSIBLE, DEFAULT_DENSITY_BAND, FREE_SURFACE, GENERATORS, INCOMPRESSIBLE, RIGID_LID,
    CostModel, DualCloud, FluidDomain, SolverConfig, generate_cloud, load_cloud,
)

CONFIG_SCHEMA = "sgfree.config/1"


class ConfigError(ValueError):
    """Malformed or out-of-range configuration; ``key`` names the culprit."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    schema: str = CONFIG_SCHEMA
    mode: str = FREE_SURFACE
    footprint: tuple = (1.0, 1.0)
    cap: float = 2.0
    lid_height: Optional[float] = None
    grid: tuple = (32, 32)
    cost: str = INCOMPRESSIBLE
    kappa: float = 1.0
    p_h: float = 0.0
    c_p: float = 1.0
    p_ref: float = 1.0
    cloud_file: Optional[str] = None
    generator: Optional[str] = None
    n_particles: Optional[int] = None
    density_band: float = DEFAULT_DENSITY_BAND
    mass_tolerance: float = 1e-10
    max_ascent_iterations: int = 200
    regularization: float = 1e-9
    backtrack: float = 0.5
    max_backtracks: int = 60
    time_step: float = 0.01
    horizon: float = 1.0
    stepper: str = "exact-rotation"
    output_cadence: int = 1
    output_dir: str = "out"
    seed: int = 0
    w2_radius: Optional[float] = None
    verify_samples: int = 20
    verify_oracle_grid: int = 16

    def domain(self) -> FluidDomain:
        return FluidDomain(self.footprint, self.cap, self.grid, self.mode, self.lid_height)

    def cost_model(self) -> CostModel:
        return CostModel(self.cost, self.kappa, self.p_h, self.c_p, self.p_ref)

    def solver(self) -> SolverConfig:
        return SolverConfig(
            mass_tolerance=self.mass_tolerance,
            max_ascent_iterations=self.max_ascent_iterations,
            backtrack=self.backtrack,
            max_backtracks=self.max_backtracks,
            regularization=self.regularization,
            time_step=self.time_step,
            horizon=self.horizon,
            stepper=self.stepper,
            output_cadence=self.output_cadence,
            w2_radius=self.w2_radius,
        )

    def cloud(self, base_dir=None) -> DualCloud:
        if self.cloud_file is not None:
            return load_cloud(_resolve(self.cloud_file, base_dir), density_band=self.density_band)
        return generate_cloud(self.generator, self.n_particles, self.footprint, self.seed,
                              self.density_band)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _resolve(path, base_dir):
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def _number(key, value, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    return value


def _pair(key, value, integer=False):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(key, f"expected a two-element list, got {value!r}")
    return tuple(_number(key, v, integer) for v in value)


def _choice(key, value, options):
    if value not in options:
        raise ConfigError(key, f"expected one of {sorted(options)}, got {value!r}")
    return value


_INTS = {"n_particles", "max_ascent_iterations", "max_backtracks", "output_cadence", "seed",
         "verify_samples", "verify_oracle_grid"}
_STRINGS = {"cloud_file", "generator", "output_dir", "schema"}


def parse_config(text, base_dir=None) -> RunConfig:
    """Parse and validate a JSON config; unknown keys are errors."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(None, f"malformed JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(None, "config must be a JSON object")
    for key in raw:
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
    vals = {}
    for key, value in raw.items():
        if value is None:
            if _FIELDS[key].default is not None:
                raise ConfigError(key, "may not be null")
            vals[key] = None
        elif key in ("footprint", "grid"):
            vals[key] = _pair(key, value, integer=key == "grid")
        elif key == "mode":
            vals[key] = _choice(key, value, {FREE_SURFACE, RIGID_LID})
        elif key == "cost":
            vals[key] = _choice(key, value, {INCOMPRESSIBLE, COMPRESSIBLE})
        elif key == "stepper":
            vals[key] = _choice(key, value, {"exact-rotation", "exact-rotation-start", "rk4"})
        elif key in _STRINGS:
            if not isinstance(value, str):
                raise ConfigError(key, f"expected a string, got {value!r}")
            vals[key] = value
        else:
            vals[key] = _number(key, value, integer=key in _INTS)
    if vals.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
        raise ConfigError("schema", f"unsupported schema {vals['schema']!r}")
    cfg = RunConfig(**vals)
    _validate(cfg, base_dir)
    return cfg


def _validate(cfg: RunConfig, base_dir):
    if (cfg.cloud_file is None) == (cfg.generator is None):
        raise ConfigError("cloud_file", "give exactly one of cloud_file or generator")
    if cfg.cloud_file is not None:
        if not _resolve(cfg.cloud_file, base_dir).is_file():
            raise ConfigError("cloud_file", f"file not found: {cfg.cloud_file}")
        if cfg.n_particles is not None:
            raise ConfigError("n_particles", "only used with a generator")
    else:
        if cfg.generator not in GENERATORS:
            raise ConfigError("generator", f"unknown generator {cfg.generator!r}")
        if cfg.n_particles is None or cfg.n_particles < 1:
            raise ConfigError("n_particles", "a generator needs n_particles >= 1")
    if not 0 < cfg.density_band < 1:
        raise ConfigError("density_band", "must lie in (0, 1)")
    if cfg.seed < 0:
        raise ConfigError("seed", "must be nonnegative")
    if cfg.verify_samples < 1 or cfg.verify_oracle_grid < 2:
        raise ConfigError("verify_samples", "verify sizes out of range")
    if cfg.lid_height is not None and cfg.mode == FREE_SURFACE:
        raise ConfigError("lid_height", "only used in rigid-lid mode")
    for key, build in (("cap", cfg.domain), ("kappa", cfg.cost_model), ("time_step", cfg.solver)):
        try:
            build()
        except ValueError as exc:
            msg = str(exc)
            name = next((f for f in _FIELDS if msg.startswith(f)), key)
            if "cap" in msg:
                name = "cap"
            elif "lid" in msg:
                name = "lid_height"
            raise ConfigError(name, msg) from None
    if cfg.cost == COMPRESSIBLE and cfg.mode == FREE_SURFACE and not cfg.cap > cfg.p_h:
        raise ConfigError("cap", "cap too low: must exceed p_h")


def effective_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["footprint"] = list(cfg.footprint)
    d["grid"] = list(cfg.grid)
    return d


def emit_config(cfg: RunConfig) -> str:
    """Effective config with every default filled in, stable key order."""
    return dumps(effective_dict(cfg)) + "\n"


def fmt_float(x: float) -> str:
    return format(x, ".17g")


def dumps(obj) -> str:
    """Single-line JSON with every float written to 17 significant digits."""
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        s = fmt_float(obj)
        return s if any(c in s for c in ".en") else s + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    if hasattr(obj, "item"):
        return dumps(obj.item())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj):
    with open(path, "w", newline="") as fh:
        fh.write(dumps(obj) + "\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
