"""
Configuration management for usm.

Supports layered config: defaults → YAML file → environment variables → CLI flags.
Every section validates its own invariants so bad values are rejected at
startup rather than deep inside an optimisation run.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class EsConfig:
    """Monte-Carlo energy-score settings."""

    sample_count: int = 1000  # M
    seed: int = 0

    def validate(self) -> None:
        _require(self.sample_count >= 2, f"es.sample_count must be >= 2, got {self.sample_count}")
        _require(self.seed >= 0, f"es.seed must be >= 0, got {self.seed}")


@dataclass
class RayConfig:
    """Probabilistic renderer settings."""

    samples_per_ray: int = 32
    # Fallback depth range; per-ray ranges come from the bounding sphere when known
    d_min: float = 0.1
    d_max: float = 10.0
    surface_band: float = 0.05      # delta, meters
    slope: float = 400.0            # l, 1/meters
    sobol_count: int = 128
    background_depth_factor: float = 1.1
    pixels_per_view: int = 64       # split 50/50 between object and background pixels
    bound_padding: float = 0.1      # bounding-sphere padding fraction
    var_floor: float = 1e-12

    def validate(self) -> None:
        _require(self.samples_per_ray >= 1, "ray.samples_per_ray must be >= 1")
        _require(self.d_min < self.d_max, f"ray.d_min ({self.d_min}) must be < d_max ({self.d_max})")
        _require(self.surface_band > 0, "ray.surface_band must be > 0")
        _require(self.slope > 0, "ray.slope must be > 0")
        _require(self.sobol_count >= 2, "ray.sobol_count must be >= 2")
        _require(self.background_depth_factor >= 1.0, "ray.background_depth_factor must be >= 1")
        _require(self.pixels_per_view >= 2, "ray.pixels_per_view must be >= 2")
        _require(self.bound_padding >= 0, "ray.bound_padding must be >= 0")
        _require(self.var_floor > 0, "ray.var_floor must be > 0")


@dataclass
class OptimConfig:
    """Joint shape/pose optimisation settings."""

    iters: int = 200
    lr: float = 0.005
    lambda_s: float = 1.0   # 3D surface loss weight
    lambda_r: float = 1.0   # 2D rendering loss weight
    lambda_c: float = 1e-3  # latent regulariser weight
    subsample: int = 2048   # world points kept for the 3D loss
    init_cov_z: float = 1e-6
    init_cov_pose: float = 1e-4
    icp_iters: int = 50
    seed: int = 0
    es: EsConfig = field(default_factory=EsConfig)
    ray: RayConfig = field(default_factory=RayConfig)

    def validate(self) -> None:
        _require(self.iters >= 0, f"optim.iters must be >= 0, got {self.iters}")
        _require(self.lr > 0, f"optim.lr must be > 0, got {self.lr}")
        for name in ("lambda_s", "lambda_r", "lambda_c"):
            _require(getattr(self, name) >= 0, f"optim.{name} must be >= 0")
        _require(self.subsample >= 1, "optim.subsample must be >= 1")
        _require(self.init_cov_z > 0 and self.init_cov_pose > 0, "initial covariances must be > 0")
        _require(self.icp_iters >= 1, "optim.icp_iters must be >= 1")
        self.es.validate()
        self.ray.validate()


@dataclass
class SynthConfig:
    """Synthetic scene generator settings (camera ring + sensor)."""

    views: int = 3
    radius: float = 3.0          # camera distance from the object centre, meters
    elevation_deg: float = 20.0
    width: int = 128
    height: int = 128
    focal: float = 128.0         # fx = fy, pixels
    noise: float = 0.0           # depth noise sigma_d, meters
    seed: int = 0

    def validate(self) -> None:
        _require(self.views >= 1, f"synth.views must be >= 1, got {self.views}")
        _require(self.radius > 0, "synth.radius must be > 0")
        _require(self.width >= 1 and self.height >= 1, "synth image size must be positive")
        _require(self.focal > 0, "synth.focal must be > 0")
        _require(self.noise >= 0, f"synth.noise must be >= 0, got {self.noise}")


@dataclass
class RunConfig:
    """Top-level application configuration."""

    optim: OptimConfig = field(default_factory=OptimConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    decoder: str = "analytic"   # "analytic" or "mlp:<path>"
    latent_dim: int = 64
    threads: Optional[int] = None
    log_level: str = "INFO"
    log_file: Optional[str] = None

    def validate(self) -> None:
        _require(self.latent_dim >= 3, f"latent_dim must be >= 3, got {self.latent_dim}")
        _require(
            self.decoder == "analytic" or self.decoder.startswith("mlp:"),
            f"decoder must be 'analytic' or 'mlp:<path>', got {self.decoder!r}",
        )
        _require(self.threads is None or self.threads >= 1, "threads must be >= 1")
        self.optim.validate()
        self.synth.validate()


def _coerce(name: str, current: Any, value: Any) -> Any:
    """Convert *value* to the type of the default it replaces."""
    if isinstance(current, bool) or current is None:
        return value
    if isinstance(current, (int, float)):
        if isinstance(value, bool):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} must be a number, got {value!r}") from None
        if isinstance(current, int):
            if not number.is_integer():
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            return int(number)
        return number
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


def _apply_dict(obj: object, data: dict, prefix: str = "") -> None:
    """Apply key/value pairs from *data* onto *obj* for matching scalar attributes."""
    for key, value in data.items():
        if hasattr(obj, key) and not isinstance(getattr(obj, key), (EsConfig, RayConfig)):
            setattr(obj, key, _coerce(prefix + key, getattr(obj, key), value))


def _section(data: dict, key: str, path: Path) -> dict:
    value = data.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: section '{key}' must be a mapping")
    return value


def load_config(config_path: Optional[str] = None) -> RunConfig:
    """
    Load configuration from YAML file then override with environment variables.

    Priority (highest wins): env vars > YAML file > built-in defaults.
    CLI flags are applied on top of the result by :func:`usm.cli.main`.

    Args:
        config_path: Optional path to a YAML configuration file.

    Returns:
        A fully populated (not yet validated) :class:`RunConfig` instance.
    """
    cfg = RunConfig()

    # ── YAML layer ────────────────────────────────────────────────────────────
    if config_path:
        path = Path(config_path)
        if path.exists():
            try:
                with open(path, encoding="utf-8") as fh:
                    data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be a mapping")

            optim = _section(data, "optim", path)
            _apply_dict(cfg.optim, optim, "optim.")
            _apply_dict(cfg.optim.es, _section(optim, "es", path), "optim.es.")
            _apply_dict(cfg.optim.ray, _section(optim, "ray", path), "optim.ray.")
            _apply_dict(cfg.synth, _section(data, "synth", path), "synth.")
            _apply_dict(cfg, {k: v for k, v in data.items() if k in ("decoder", "latent_dim", "log_level")})
            if data.get("threads") is not None:
                cfg.threads = _coerce("threads", 0, data["threads"])
            if data.get("log_file") is not None:
                cfg.log_file = _coerce("log_file", "", data["log_file"])

    # ── Environment variable layer ────────────────────────────────────────────
    try:
        if os.getenv("USM_THREADS"):
            cfg.threads = int(os.environ["USM_THREADS"])
        if os.getenv("USM_SEED"):
            cfg.optim.seed = int(os.environ["USM_SEED"])
    except ValueError as exc:
        raise ConfigError(f"environment override is not an integer ({exc})") from exc
    if os.getenv("USM_LOG_LEVEL"):
        cfg.log_level = os.environ["USM_LOG_LEVEL"]
    if os.getenv("USM_DECODER"):
        cfg.decoder = os.environ["USM_DECODER"]

    return cfg
