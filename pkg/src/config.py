from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 fallback
    import tomli as tomllib

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

load_dotenv()


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Settings:
    log_level: str
    threads: int
    deterministic: bool
    data_dir: Path


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


def get_settings() -> Settings:
    log_level = os.getenv("LOG_LEVEL", "INFO").upper()
    threads = int(os.getenv("VOXFIELD_THREADS", "1"))
    deterministic = _env_flag("VOXFIELD_DETERMINISTIC", "1")
    data_dir = Path(os.getenv("VOXFIELD_DATA_DIR", "data")).resolve()

    return Settings(
        log_level=log_level,
        threads=max(1, threads),
        deterministic=deterministic,
        data_dir=data_dir,
    )


# -----------------------------
# Algorithm configs
# -----------------------------
class MappingConfig(BaseModel):
    """Offline map optimization. Learning rates and init values are desk-scale starting points."""

    model_config = ConfigDict(extra="forbid")

    lambda_d: float = Field(1.0, ge=0.0)
    rays_per_batch: int = Field(4096, ge=1)
    iterations_per_stage: int = Field(2000, ge=0)
    lr_sigma: float = Field(30.0, ge=0.0)
    lr_sh: float = Field(1e-2, ge=0.0)
    rmsprop_decay: float = Field(0.95, ge=0.0, lt=1.0)
    rmsprop_eps: float = Field(1e-8, gt=0.0)
    keyframe_stride: int = Field(10, ge=1)

    # cells per axis (longest axis); each stage doubles the previous one
    upsample_schedule: List[int] = Field(default_factory=lambda: [32, 64, 128])
    max_cells: int = Field(512, ge=1)
    prune_threshold: float = Field(1e-3, ge=0.0)
    prune_between_stages: bool = True

    init_sigma: float = 0.1
    init_sh: float = 0.0
    bounds_margin: float = Field(0.05, ge=0.0)

    step_ratio: float = Field(0.5, gt=0.0)
    t_near: float = Field(0.05, ge=0.0)
    t_far: Optional[float] = Field(None, gt=0.0)

    chunk_rays: int = Field(2048, ge=1)
    dtype: Literal["float32", "float64"] = "float32"
    seed: int = 0

    @field_validator("upsample_schedule")
    @classmethod
    def _doubling(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("upsample_schedule must name at least one resolution")
        if any(c < 1 for c in v):
            raise ValueError("upsample_schedule entries must be >= 1 cell")
        for a, b in zip(v, v[1:]):
            if b != 2 * a:
                raise ValueError(f"upsample_schedule must double each stage, got {a} -> {b}")
        return v


class TrackingConfig(BaseModel):
    """Frame-to-model pose estimation with Adam on the local (omega, tau) chart."""

    model_config = ConfigDict(extra="forbid")

    rays_per_iteration: int = Field(2048, ge=1)
    iterations: int = Field(40, ge=0)

    lr_rot: float = Field(1e-3, gt=0.0)
    lr_trans: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)

    lambda_d: float = Field(1.0, ge=0.0)
    lambda_c: float = Field(1.0, ge=0.0)

    init_policy: Literal["previous", "constant_velocity"] = "previous"
    convergence_threshold: float = Field(1e-7, ge=0.0)
    divergence_factor: float = Field(10.0, gt=1.0)
    divergence_patience: int = Field(20, ge=1)

    # False: SH basis held fixed along d, gradient flows through the sample positions only
    include_sh_direction: bool = False

    step_ratio: float = Field(0.5, gt=0.0)
    t_near: float = Field(0.05, ge=0.0)
    t_far: Optional[float] = Field(None, gt=0.0)

    chunk_rays: int = Field(2048, ge=1)
    seed: int = 0


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mapping: MappingConfig = Field(default_factory=MappingConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    deterministic: bool = True
    paths: Dict[str, str] = Field(default_factory=dict)


# -----------------------------
# Loading + precedence
# -----------------------------
def load_config_file(path: str | Path) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        if p.suffix.lower() == ".toml":
            with p.open("rb") as f:
                return tomllib.load(f)
        return json.loads(p.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"config file {p} is not parseable: {e}") from e


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        elif v is not None:
            out[k] = v
    return out


def build_run_config(
    config_path: Optional[str | Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    defaults < env settings < config file < overrides (command-line flags).

    A top-level seed is propagated into mapping/tracking unless they set their own.
    """
    s = get_settings()
    merged: Dict[str, Any] = {"threads": s.threads, "deterministic": s.deterministic}

    file_values: Dict[str, Any] = {}
    if config_path:
        file_values = load_config_file(config_path)
        merged = _deep_merge(merged, file_values)
    if overrides:
        merged = _deep_merge(merged, overrides)

    seed = merged.get("seed")
    if seed is not None:
        for section in ("mapping", "tracking"):
            own = (file_values.get(section) or {}).get("seed")
            own = ((overrides or {}).get(section) or {}).get("seed", own)
            if own is None:
                merged.setdefault(section, {})
                merged[section] = {**merged[section], "seed": seed}

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
