"""YAML-driven scenario configuration.

One document (YAML or JSON) describes a whole scenario: the synthetic world,
sensor noise, camera, estimator, fusion grid, training loss, controller,
mission and data-collection policy.

Validation
----------
- ``schema_version`` is checked against the supported set.
- Unknown keys are reported with their dotted path (WARN by default) and ignored.
- ``ScenarioConfig.validate()`` checks every sub-config invariant and raises
  :class:`ConfigError` naming the offending field.

Strict mode triggers
--------------------
- YAML key: config_strict: true
- Env var: TRAVNAV_CONFIG_STRICT=1
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional
import dataclasses as _dc
import logging
import math
import os
from typing import get_args, get_origin, get_type_hints

import numpy as np
import yaml

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
SUPPORTED_SCHEMA_VERSIONS = {"1.0"}

OBSTACLE_KINDS = (
    "solid_block",
    "solid_cylinder",
    "tall_grass_patch",
    "ditch",
    "mud_patch",
)
MHE_SOLVERS = ("gauss_newton_projected", "lm_box")
MPC_SELECTIONS = ("best_of_n", "exponential_weighting")
FUSER_MODES = ("max", "learnable", "hybrid")
MODEL_VARIANTS = ("vision_only", "voxel", "temporal")
MAP_SOURCES = ("model", "geometric", "truth")


class ConfigError(ValueError):
    """Raised when a scenario configuration violates an invariant."""


def _is_dataclass_type(tp: Any) -> bool:
    try:
        return hasattr(tp, "__dataclass_fields__")
    except Exception:
        return False


def _field_types(dc_cls: Any) -> dict:
    return get_type_hints(dc_cls)


def _list_item_type(tp: Any) -> Any:
    origin = get_origin(tp)
    args = get_args(tp)
    if origin in (list, List) and args and _is_dataclass_type(args[0]):
        return args[0]
    return None


def _validate_and_filter(
    dc_cls: Any, raw: Any, prefix: str, unknown_paths: List[str]
) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        return raw
    types = _field_types(dc_cls)
    filtered: dict = {}
    for k, v in raw.items():
        path = f"{prefix}.{k}" if prefix else str(k)
        if k not in types:
            unknown_paths.append(path)
            continue
        tp = types[k]
        item_tp = _list_item_type(tp)
        if _is_dataclass_type(tp) and isinstance(v, dict):
            filtered[k] = _validate_and_filter(tp, v, path, unknown_paths)
        elif item_tp is not None and isinstance(v, list):
            filtered[k] = [
                _validate_and_filter(item_tp, item, f"{path}[{i}]", unknown_paths)
                if isinstance(item, dict)
                else item
                for i, item in enumerate(v)
            ]
        else:
            filtered[k] = v
    return filtered


def _build(dc_cls: Any, data: dict) -> Any:
    """Instantiate a (nested) dataclass from already-filtered plain data."""
    types = _field_types(dc_cls)
    kwargs = {}
    for k, v in data.items():
        tp = types[k]
        item_tp = _list_item_type(tp)
        if _is_dataclass_type(tp) and isinstance(v, dict):
            kwargs[k] = _build(tp, v)
        elif item_tp is not None and isinstance(v, list):
            kwargs[k] = [_build(item_tp, x) if isinstance(x, dict) else x for x in v]
        else:
            kwargs[k] = v
    try:
        return dc_cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Cannot build {dc_cls.__name__}: {e}") from e


def as_weight_matrix(value: Any, dim: int, name: str) -> np.ndarray:
    """Diagonal list or full square matrix → (dim, dim) float array."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ConfigError(f"{name}: expected {dim} diagonal entries, got {arr.shape[0]}")
        arr = np.diag(arr)
    if arr.shape != (dim, dim):
        raise ConfigError(f"{name}: expected a {dim}x{dim} matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name}: non-finite entries")
    return arr


def _check_psd(mat: np.ndarray, name: str, strict: bool = False) -> None:
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ConfigError(f"{name} must be symmetric")
    ev = np.linalg.eigvalsh(mat)
    if strict and ev.min() <= 0:
        raise ConfigError(f"{name} must be positive definite (min eigenvalue {ev.min():.3g})")
    if ev.min() < -1e-12:
        raise ConfigError(f"{name} must be positive semi-definite (min eigenvalue {ev.min():.3g})")


@dataclass
class ObstacleSpec:
    """One obstacle; boxes use (x, y) as centre with size_x/size_y, cylinders use radius.

    height/mu/nu/visible_to_depth default per kind when left as None.
    """

    kind: str = "solid_block"
    x: float = 0.0
    y: float = 0.0
    size_x: float = 1.0
    size_y: float = 1.0
    radius: float = 0.3
    height: Optional[float] = None
    mu: Optional[float] = None
    nu: Optional[float] = None
    visible_to_depth: Optional[bool] = None


@dataclass
class WorldSpec:
    width: float = 20.0
    height: float = 20.0
    cell_size: float = 0.1
    base_mu: float = 1.0
    base_nu: float = 1.0
    obstacles: List[ObstacleSpec] = field(default_factory=list)
    # procedural low-traction patches drawn from the world seed
    random_patches: int = 0
    patch_size_range: List[float] = field(default_factory=lambda: [1.0, 3.0])
    patch_traction_range: List[float] = field(default_factory=lambda: [0.2, 0.6])


@dataclass
class SensorNoise:
    gnss_sigma: float = 0.0
    compass_offset: float = 0.0
    compass_sigma: float = 0.0
    depth_sigma: float = 0.0
    depth_dropout_rate: float = 0.0


@dataclass
class CameraSpec:
    width: int = 32
    height: int = 24
    hfov_deg: float = 90.0
    mount_x: float = 0.2
    mount_height: float = 0.3
    pitch_deg: float = 15.0  # pitch-down
    yaw_deg: float = 0.0
    max_range: float = 10.0


@dataclass
class EstimatorConfig:
    N: int = 20
    dt: float = 0.1
    Px: List[float] = field(default_factory=lambda: [0.1, 0.1, 0.1])
    Pm: List[float] = field(default_factory=lambda: [0.1, 0.1, 0.1])
    Pw: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    solver: str = "gauss_newton_projected"
    max_iters: int = 50
    tol: float = 1e-10
    # identifiability guard: Σ|v|·dt [m] and Σ|ω|·dt [rad] over the window
    min_linear_excitation: float = 0.05
    min_angular_excitation: float = 0.05
    prior_mu: float = 1.0
    prior_nu: float = 1.0
    prior_dtheta: float = 0.0

    def weight(self, name: str) -> np.ndarray:
        return as_weight_matrix(getattr(self, name), 3, f"estimator.{name}")


@dataclass
class FusionConfig:
    grid_x: float = 20.0
    grid_y: float = 20.0
    grid_z: float = 1.6
    cell_xy: float = 0.1
    cell_z: float = 0.4
    z_min: float = -0.4
    d_min: float = 0.5
    d_max: float = 10.0
    depth_bins: int = 32
    bin_spacing: str = "uniform"  # uniform | linear_increasing
    frames: int = 4
    frame_stride: int = 5
    variant: str = "temporal"  # vision_only | voxel | temporal
    fuser: str = "hybrid"  # max | learnable | hybrid
    encoder_gain: float = 8.0
    head_bias_init: float = 0.0


@dataclass
class LossConfig:
    lambda_depth: float = 0.1
    lds_kernel_sigma: float = 2.0
    lds_bins: int = 20
    depth_dropout_p: float = 0.3
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 8
    rng_seed: int = 0
    M: int = 5
    val_fraction: float = 0.2


@dataclass
class MPCConfig:
    N: int = 30
    dt: float = 0.1
    Q: List[float] = field(default_factory=lambda: [1.0, 1.0, 0.0])
    R: List[float] = field(default_factory=lambda: [0.1, 0.1])
    QN: List[float] = field(default_factory=lambda: [5.0, 5.0, 0.0])
    W_mu: float = 1.0
    W_nu: float = 0.5
    num_samples: int = 512
    noise_sigma: List[float] = field(default_factory=lambda: [0.2, 0.5])
    # turn rates in the deterministic arc lattice, 0 disables it
    arc_rates: int = 7
    selection: str = "exponential_weighting"
    temperature: float = 0.1
    clearance_k: int = 3
    angular_scale: float = 1.0
    v_max: float = 1.0
    v_min: float = 0.0
    omega_max: float = 1.5
    v_cruise: float = 0.8
    slowdown_radius: float = 1.0
    # both channels below this at x0 means the robot cannot move
    stuck_traction: float = 0.02

    def weight(self, name: str, dim: int) -> np.ndarray:
        return as_weight_matrix(getattr(self, name), dim, f"mpc.{name}")


@dataclass
class MissionSpec:
    start: List[float] = field(default_factory=lambda: [2.0, 10.0, 0.0])
    waypoints: List[List[float]] = field(default_factory=lambda: [[18.0, 10.0]])
    arrival_radius: float = 0.5


@dataclass
class CollectSpec:
    episodes: int = 3
    ticks_per_episode: int = 300
    goals_per_episode: int = 4
    # probability that a goal is placed inside a low-traction patch
    patch_goal_probability: float = 0.5
    steering_gain: float = 1.5
    exploration_sigma: List[float] = field(default_factory=lambda: [0.1, 0.3])
    stuck_ticks: int = 15


@dataclass
class ScenarioConfig:
    # schema + validation
    schema_version: str = SCHEMA_VERSION
    config_strict: bool = False

    name: str = "scenario"
    output_dir: str = "travnav_results"
    seed: int = 42
    tick_rate: float = 10.0
    max_ticks: int = 600
    stuck_ticks: int = 30
    map_source: str = "model"
    save_maps: bool = False
    dump_samples: bool = False
    # collect: per-frame depth PGMs (mm) and occupancy voxel CSVs under frames/
    dump_depth: bool = False
    dump_voxels: bool = False
    n_jobs: int = 1

    world: WorldSpec = field(default_factory=WorldSpec)
    noise: SensorNoise = field(default_factory=SensorNoise)
    camera: CameraSpec = field(default_factory=CameraSpec)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mpc: MPCConfig = field(default_factory=MPCConfig)
    mission: MissionSpec = field(default_factory=MissionSpec)
    collect: CollectSpec = field(default_factory=CollectSpec)

    @property
    def tick_dt(self) -> float:
        return 1.0 / float(self.tick_rate)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        raw = dict(raw or {})
        schema_in = str(raw.get("schema_version", SCHEMA_VERSION))
        strict = bool(raw.get("config_strict", False)) or (
            os.environ.get("TRAVNAV_CONFIG_STRICT", "0") == "1"
        )
        if schema_in not in SUPPORTED_SCHEMA_VERSIONS:
            msg = f"Unsupported schema_version={schema_in!r}. Supported: {sorted(SUPPORTED_SCHEMA_VERSIONS)}"
            if strict:
                raise ConfigError(msg)
            logger.warning(msg)

        unknown_paths: List[str] = []
        filtered = _validate_and_filter(cls, raw, prefix="", unknown_paths=unknown_paths)
        if unknown_paths:
            msg = (
                f"Unknown config keys ignored ({len(set(unknown_paths))}): {sorted(set(unknown_paths))[:20]}"
                + (" ..." if len(set(unknown_paths)) > 20 else "")
            )
            if strict:
                raise ConfigError(msg)
            logger.warning(msg)

        cfg = _build(cls, filtered)
        cfg._config_validation = {
            "schema_version_in": schema_in,
            "schema_version_effective": cfg.schema_version,
            "supported_schema_versions": sorted(SUPPORTED_SCHEMA_VERSIONS),
            "unknown_keys": sorted(set(unknown_paths)),
            "strict": strict,
            "status": "PASS"
            if (schema_in in SUPPORTED_SCHEMA_VERSIONS and not unknown_paths)
            else ("WARN" if not strict else "FAIL"),
        }
        return cfg

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ScenarioConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"Config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {p}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return _dc.asdict(self)

    def to_yaml(self, path: str | Path) -> None:
        Path(path).write_text(
            yaml.dump(self.to_dict(), default_flow_style=False, sort_keys=False)
        )

    def validate(self) -> "ScenarioConfig":
        """Check all sub-config invariants; returns self for chaining."""
        _validate_world(self.world)
        _validate_noise(self.noise)
        _validate_camera(self.camera)
        _validate_estimator(self.estimator)
        _validate_fusion(self.fusion)
        _validate_loss(self.loss)
        _validate_mpc(self.mpc)
        _validate_mission(self.mission, self.world)
        if not self.tick_rate > 0:
            raise ConfigError(f"tick_rate must be > 0, got {self.tick_rate}")
        if self.max_ticks < 1:
            raise ConfigError(f"max_ticks must be >= 1, got {self.max_ticks}")
        if self.stuck_ticks < 1:
            raise ConfigError(f"stuck_ticks must be >= 1, got {self.stuck_ticks}")
        if self.map_source not in MAP_SOURCES:
            raise ConfigError(f"map_source must be one of {MAP_SOURCES}, got {self.map_source!r}")
        if abs(self.estimator.dt - self.tick_dt) > 1e-9:
            raise ConfigError(
                f"estimator.dt ({self.estimator.dt}) must equal 1/tick_rate ({self.tick_dt})"
            )
        if self.collect.episodes < 1 or self.collect.ticks_per_episode < 1:
            raise ConfigError("collect.episodes and collect.ticks_per_episode must be >= 1")
        if not 0.0 <= self.collect.patch_goal_probability <= 1.0:
            raise ConfigError("collect.patch_goal_probability must be in [0,1]")
        if self.collect.goals_per_episode < 1 or self.collect.stuck_ticks < 1:
            raise ConfigError("collect.goals_per_episode and collect.stuck_ticks must be >= 1")
        if self.n_jobs == 0:
            raise ConfigError("n_jobs must be non-zero (joblib convention)")
        return self


def _validate_world(w: WorldSpec) -> None:
    from .world.sim import WorldSpecError

    if not (w.width > 0 and w.height > 0):
        raise WorldSpecError(f"world extent must be positive, got {w.width}x{w.height}")
    if not w.cell_size > 0:
        raise WorldSpecError(f"world.cell_size must be > 0, got {w.cell_size}")
    for name in ("base_mu", "base_nu"):
        v = getattr(w, name)
        if not 0.0 <= v <= 1.0:
            raise WorldSpecError(f"world.{name} must be in [0,1], got {v}")
    if w.random_patches < 0:
        raise WorldSpecError("world.random_patches must be >= 0")


def _validate_noise(n: SensorNoise) -> None:
    for name in ("gnss_sigma", "compass_sigma", "depth_sigma"):
        if getattr(n, name) < 0:
            raise ConfigError(f"noise.{name} must be >= 0")
    if not 0.0 <= n.depth_dropout_rate <= 1.0:
        raise ConfigError("noise.depth_dropout_rate must be in [0,1]")
    if not -math.pi <= n.compass_offset < math.pi:
        raise ConfigError(f"noise.compass_offset must be in [-pi, pi), got {n.compass_offset}")


def _validate_camera(c: CameraSpec) -> None:
    if c.width < 1 or c.height < 1:
        raise ConfigError(f"camera resolution must be positive, got {c.width}x{c.height}")
    if not 0 < c.hfov_deg < 180:
        raise ConfigError(f"camera.hfov_deg must be in (0, 180), got {c.hfov_deg}")
    if not c.max_range > 0:
        raise ConfigError("camera.max_range must be > 0")


def _validate_estimator(e: EstimatorConfig) -> None:
    if e.N < 2:
        raise ConfigError(f"estimator.N must be >= 2, got {e.N}")
    if not e.dt > 0:
        raise ConfigError("estimator.dt must be > 0")
    if not e.tol > 0:
        raise ConfigError("estimator.tol must be > 0")
    if e.max_iters < 1:
        raise ConfigError("estimator.max_iters must be >= 1")
    if e.solver not in MHE_SOLVERS:
        raise ConfigError(f"estimator.solver must be one of {MHE_SOLVERS}, got {e.solver!r}")
    for name in ("Px", "Pm", "Pw"):
        _check_psd(e.weight(name), f"estimator.{name}")
    for name in ("prior_mu", "prior_nu"):
        if not 0.0 <= getattr(e, name) <= 1.0:
            raise ConfigError(f"estimator.{name} must be in [0,1]")


def _validate_fusion(f: FusionConfig) -> None:
    for name in ("grid_x", "grid_y", "grid_z", "cell_xy", "cell_z"):
        if not getattr(f, name) > 0:
            raise ConfigError(f"fusion.{name} must be > 0")
    if not 0 < f.d_min < f.d_max:
        raise ConfigError(f"fusion depth range must satisfy 0 < d_min < d_max, got [{f.d_min}, {f.d_max}]")
    if f.depth_bins < 2:
        raise ConfigError("fusion.depth_bins must be >= 2")
    if f.bin_spacing not in ("uniform", "linear_increasing"):
        raise ConfigError(f"fusion.bin_spacing must be uniform|linear_increasing, got {f.bin_spacing!r}")
    if f.frames < 1 or f.frame_stride < 1:
        raise ConfigError("fusion.frames and fusion.frame_stride must be >= 1")
    if f.variant not in MODEL_VARIANTS:
        raise ConfigError(f"fusion.variant must be one of {MODEL_VARIANTS}, got {f.variant!r}")
    if f.fuser not in FUSER_MODES:
        raise ConfigError(f"fusion.fuser must be one of {FUSER_MODES}, got {f.fuser!r}")


def _validate_loss(lc: LossConfig) -> None:
    if lc.lambda_depth < 0:
        raise ConfigError("loss.lambda_depth must be >= 0")
    if not 0.0 <= lc.depth_dropout_p <= 1.0:
        raise ConfigError("loss.depth_dropout_p must be in [0,1]")
    if lc.lds_bins < 1:
        raise ConfigError("loss.lds_bins must be >= 1")
    if lc.learning_rate < 0 or not 0 <= lc.momentum < 1:
        raise ConfigError("loss.learning_rate must be >= 0 and loss.momentum in [0,1)")
    if lc.epochs < 1 or lc.batch_size < 1 or lc.M < 1:
        raise ConfigError("loss.epochs, loss.batch_size and loss.M must be >= 1")
    if not 0.0 <= lc.val_fraction < 1.0:
        raise ConfigError("loss.val_fraction must be in [0,1)")


def _validate_mpc(m: MPCConfig) -> None:
    if m.N < 1:
        raise ConfigError("mpc.N must be >= 1")
    if not m.dt > 0:
        raise ConfigError("mpc.dt must be > 0")
    if m.num_samples < 1:
        raise ConfigError("mpc.num_samples must be >= 1")
    if m.clearance_k < 1 or m.clearance_k % 2 == 0:
        raise ConfigError(f"mpc.clearance_k must be odd and >= 1, got {m.clearance_k}")
    if not m.angular_scale > 0:
        raise ConfigError("mpc.angular_scale must be > 0")
    if m.selection not in MPC_SELECTIONS:
        raise ConfigError(f"mpc.selection must be one of {MPC_SELECTIONS}, got {m.selection!r}")
    if not m.temperature > 0:
        raise ConfigError("mpc.temperature must be > 0")
    if not (m.v_max > 0 and m.omega_max > 0):
        raise ConfigError("mpc.v_max and mpc.omega_max must be > 0")
    if not -m.v_max <= m.v_min <= m.v_max:
        raise ConfigError("mpc.v_min must lie in [-v_max, v_max]")
    if len(m.noise_sigma) != 2 or min(m.noise_sigma) < 0:
        raise ConfigError("mpc.noise_sigma must be two non-negative values (sigma_v, sigma_omega)")
    if m.slowdown_radius < 0 or m.v_cruise < 0:
        raise ConfigError("mpc.slowdown_radius and mpc.v_cruise must be >= 0")
    if m.arc_rates != 0 and m.arc_rates < 2:
        raise ConfigError(f"mpc.arc_rates must be 0 or >= 2, got {m.arc_rates}")
    if not 0.0 <= m.stuck_traction < 1.0:
        raise ConfigError(f"mpc.stuck_traction must be in [0,1), got {m.stuck_traction}")
    _check_psd(m.weight("Q", 3), "mpc.Q")
    _check_psd(m.weight("R", 2), "mpc.R")
    _check_psd(m.weight("QN", 3), "mpc.QN")


def _validate_mission(ms: MissionSpec, w: WorldSpec) -> None:
    if len(ms.start) != 3:
        raise ConfigError("mission.start must be [x, y, theta]")
    if not ms.waypoints:
        raise ConfigError("mission.waypoints must be non-empty")
    if not ms.arrival_radius > 0:
        raise ConfigError("mission.arrival_radius must be > 0")
    for i, wp in enumerate(ms.waypoints):
        if len(wp) != 2:
            raise ConfigError(f"mission.waypoints[{i}] must be [x, y]")
    x, y = ms.start[0], ms.start[1]
    if not (0 <= x <= w.width and 0 <= y <= w.height):
        raise ConfigError(f"mission.start ({x}, {y}) lies outside the world extent")
