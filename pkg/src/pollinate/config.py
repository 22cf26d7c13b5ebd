"""
Pipeline configuration.

One JSON document (with a schema version) holds every tunable of the
pipeline; process-level settings such as log level and sweep workers come
from the environment, optionally via a .env file.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from .errors import ConfigError
from .models import MaterialParams

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FusionConfig:
    icp: bool = True
    icp_max_iter: int = 50
    icp_tol: float = 1e-7
    downsample_cell: float = 0.002
    # None means 3 x downsample_cell
    dbscan_eps: float | None = None
    dbscan_min_pts: int = 8
    voxel_resolution: float = 0.002
    max_grid_dim: int = 512
    fill_volume: bool = True

    @property
    def effective_eps(self) -> float:
        if self.dbscan_eps is not None:
            return self.dbscan_eps
        return 3.0 * self.downsample_cell


@dataclass(frozen=True)
class SkeletonConfig:
    knn_k: int = 6
    epsilon: float = 0.5
    beta: float = 1.0
    gamma: float = 1.0
    min_branch_length: float = 0.02
    junction_merge_length: float = 0.01


@dataclass(frozen=True)
class GraspConfig:
    alpha: float = 1.0
    v_bias: float = 1.0
    max_angle_deg: float = 60.0
    obstruction_radius: float = 0.10
    n_dirs: int = 360


@dataclass(frozen=True)
class MaterialConfig:
    young_modulus: float = 5.0e9
    density: float = 900.0
    damping: float = 0.5
    max_edge_len: float = 0.02

    def to_params(self) -> MaterialParams:
        return MaterialParams(self.young_modulus, self.density, self.damping)


@dataclass(frozen=True)
class ActuationConfig:
    # -1 selects the grasp node planned from the skeleton
    node: int = -1
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    amplitude_m: float = 0.002
    frequency_hz: float = 5.0
    guess_hops: int = 2
    guess_decay: float = 0.5


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-8
    max_iter: int = 50


@dataclass(frozen=True)
class SimConfig:
    dt_s: float = 1e-3
    duration_s: float = 2.0
    gravity_on: bool = True
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    presettle: bool = True
    actuated: bool = True
    actuation: ActuationConfig = field(default_factory=ActuationConfig)
    # -1 selects the highest leaf (the flower)
    record: tuple[int, ...] = (-1,)
    newton: NewtonConfig = field(default_factory=NewtonConfig)


@dataclass(frozen=True)
class BenchConfig:
    settle_periods: float = 5.0
    measure_periods: float = 10.0
    monotone_tol: float = 0.02
    amplitudes_m: tuple[float, ...] = (0.001, 0.002, 0.003, 0.004, 0.005)
    grasp_nodes: tuple[int, ...] = ()


@dataclass(frozen=True)
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    fusion: FusionConfig = field(default_factory=FusionConfig)
    skeleton: SkeletonConfig = field(default_factory=SkeletonConfig)
    grasp: GraspConfig = field(default_factory=GraspConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Settings:
    """Process-level settings read from the environment."""

    config_path: str | None
    log_level: str
    log_dir: str
    workers: int


def get_settings() -> Settings:
    """Read POLLINATE_* environment variables."""
    try:
        workers = int(os.getenv("POLLINATE_WORKERS", "1"))
    except ValueError as e:
        raise ConfigError("POLLINATE_WORKERS must be an integer") from e
    return Settings(
        config_path=os.getenv("POLLINATE_CONFIG") or None,
        log_level=os.getenv("POLLINATE_LOG_LEVEL", "INFO").upper(),
        log_dir=os.getenv("POLLINATE_LOG_DIR", "logs"),
        workers=max(1, workers),
    )


def _build(cls, data: Any, path: str):
    """Instantiate dataclass cls from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"'{path or 'config'}' must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        location = path or "config"
        raise ConfigError(f"Unknown key(s) in {location}: {', '.join(unknown)}")

    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        key_path = f"{path}.{name}" if path else name
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, key_path)
        elif isinstance(default, tuple):
            if not isinstance(value, list | tuple):
                raise ConfigError(f"'{key_path}' must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value in {path or 'config'}: {e}") from e


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    """Validate a parsed config document and fill in defaults."""
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version {version} does not match supported version {SCHEMA_VERSION}"
        )
    return _build(PipelineConfig, data, "")


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load a config file; no path (and no POLLINATE_CONFIG) gives defaults."""
    if path is None:
        path = get_settings().config_path
    if path is None:
        return PipelineConfig()

    config_file = Path(path)
    if not config_file.exists():
        raise ConfigError(f"Config file not found: {config_file}")
    try:
        with open(config_file, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_file} is not valid JSON: {e}") from e

    config = config_from_dict(data)
    logger.info(f"Loaded configuration from {config_file}")
    return config


def apply_overrides(config: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply 'section.key=value' overrides; values are parsed as JSON."""
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' must look like section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw

        target = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigError(f"Unknown config section in override '{key}'")
            target = target[part]
        if parts[-1] not in target:
            raise ConfigError(f"Unknown config key in override '{key}'")
        target[parts[-1]] = value
    return config_from_dict(data)


def with_sim(config: PipelineConfig, **changes) -> PipelineConfig:
    """Copy of config with SimConfig fields replaced."""
    return replace(config, sim=replace(config.sim, **changes))
