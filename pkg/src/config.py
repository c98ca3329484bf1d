from __future__ import annotations

"""
Central configuration module for the SDS hand lab.

Responsibilities:
- define project-level paths (configs, run output root);
- define the typed ExperimentConfig made of nested sections (field,
  cameras, codec, schedule, hand, landscape, loss, toggles, optim,
  report, gradfield);
- load / emit experiment configs as YAML (configs/default.yaml).

Every experiment is described by one YAML file; anything not mentioned
falls back to the desk-scale defaults below. Unknown keys are rejected
so a typo never silently runs the default.
"""

import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigurationError

OUTPUT_ENV_VAR = "SDSLAB_OUT"

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")
VIEW_BUCKETS = ("front", "back", "side", "top", "bottom")


# -------------------------------------------------------------------
# Paths
# -------------------------------------------------------------------


class Paths(BaseModel):
    """Convenience container for important project paths."""

    project_root: Path
    configs_dir: Path
    runs_dir: Path

    @classmethod
    def from_project_root(cls, root: Optional[Path] = None) -> "Paths":
        """
        Build a Paths object starting from the project root.

        If root is not provided, the root is inferred as two levels
        above this file: project_root/src/config.py -> project_root.
        """
        if root is None:
            root = Path(__file__).resolve().parents[1]

        return cls(
            project_root=root,
            configs_dir=root / "configs",
            runs_dir=root / "runs",
        )


PATHS = Paths.from_project_root()

DEFAULT_CONFIG_PATH: Path = PATHS.configs_dir / "default.yaml"


def output_root() -> Path:
    """Root for run directories: $SDSLAB_OUT when set, else <project>/runs."""
    env = os.environ.get(OUTPUT_ENV_VAR, "").strip()
    return Path(env) if env else PATHS.runs_dir


# -------------------------------------------------------------------
# Config sections
# -------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FieldConfig(_Section):
    """
    Voxel field geometry and initialization.

    resolution: grid nodes per axis.
    extent: half-width of the cube [-extent, extent]^3 in scene units.
    opacity_range_floor: divisor floor of the min-max normalization used
      when opacity maps are compared with silhouettes.
    """

    resolution: int = Field(default=48, ge=8, description="Grid nodes per axis.")
    extent: float = Field(default=1.25, gt=0.0, description="Half-width of the field cube.")
    density_scale: float = Field(default=10.0, gt=0.0, description="sigma = scale * softplus(raw).")
    init_density: float = Field(default=0.01, ge=0.0, description="Density of the spherical init.")
    init_radius_fraction: float = Field(
        default=0.8, gt=0.0, le=1.0, description="Sphere radius as a fraction of extent."
    )
    reference_density: float = Field(
        default=50.0, gt=0.0, description="Density inside capsules of voxelized reference hands."
    )
    opacity_range_floor: float = Field(default=0.1, ge=0.0)


class CameraConfig(_Section):
    """Camera ring: `count` cameras per elevation, all looking at the origin."""

    count: int = Field(default=8, ge=1)
    radius: float = Field(default=3.5, gt=0.0)
    elevations: List[float] = Field(default_factory=lambda: [15.0])
    fov: float = Field(default=50.0, gt=0.0, lt=180.0, description="Field of view in degrees.")
    image_size: int = Field(default=64, ge=4)
    n_samples: int = Field(default=64, ge=2, description="Samples per ray.")
    jitter: bool = Field(default=False, description="Stratified jitter of ray samples.")

    @field_validator("elevations")
    @classmethod
    def _check_elevations(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("at least one elevation is required")
        for e in v:
            if not (-90.0 <= e <= 90.0):
                raise ValueError(f"elevation {e} outside [-90, 90]")
        return v


class CodecConfig(_Section):
    latent_size: int = Field(default=16, ge=1, description="Latent pixels per side.")


class ScheduleConfig(_Section):
    """Diffusion schedule and annealing constants."""

    num_steps: int = Field(default=1000, ge=1)
    beta_start: float = Field(default=1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(default=2e-2, gt=0.0, lt=1.0)
    t_max: int = Field(default=600, ge=1)
    t_min: int = Field(default=300, ge=1)
    lambda_max_chs: float = Field(default=15000.0, ge=0.0)
    lambda_min_chs: float = Field(default=1000.0, ge=0.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "ScheduleConfig":
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        if not (self.t_max > self.t_min):
            raise ValueError(f"t_max ({self.t_max}) must exceed t_min ({self.t_min})")
        if self.t_max > self.num_steps:
            raise ValueError(f"t_max ({self.t_max}) exceeds num_steps ({self.num_steps})")
        if self.lambda_max_chs < self.lambda_min_chs:
            raise ValueError("lambda_max_chs must not be below lambda_min_chs")
        return self


class HandConfig(_Section):
    """Prompted hand: which mode label it is and its articulation (radians)."""

    label: str = "five_finger"
    curl: List[float] = Field(default_factory=lambda: [0.0] * 5)
    spread: List[float] = Field(default_factory=lambda: [0.0] * 5)
    wrist_rotation: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    translation: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])

    @model_validator(mode="after")
    def _check_pose(self) -> "HandConfig":
        if len(self.curl) != 5 or len(self.spread) != 5:
            raise ValueError("curl and spread need exactly 5 values (thumb..pinky)")
        if len(self.wrist_rotation) != 3 or len(self.translation) != 3:
            raise ValueError("wrist_rotation and translation need exactly 3 values")
        for k, c in enumerate(self.curl):
            if not (0.0 <= c <= math.pi / 2.0):
                raise ValueError(f"curl[{k}] = {c} outside [0, pi/2]")
        for k, s in enumerate(self.spread):
            if not (-math.pi / 6.0 <= s <= math.pi / 6.0):
                raise ValueError(f"spread[{k}] = {s} outside [-pi/6, pi/6]")
        return self


class ModeSpec(_Section):
    """One candidate hand of the mode landscape."""

    label: str
    weight: float = Field(gt=0.0)
    missing_fingers: List[str] = Field(default_factory=list)
    palette: str = "light"

    @field_validator("missing_fingers")
    @classmethod
    def _check_fingers(cls, v: List[str]) -> List[str]:
        for name in v:
            if name not in FINGER_NAMES:
                raise ValueError(f"unknown finger {name!r}")
        return v

    @field_validator("palette")
    @classmethod
    def _check_palette(cls, v: str) -> str:
        if v not in ("light", "dark"):
            raise ValueError(f"unknown palette {v!r}, expected 'light' or 'dark'")
        return v


def _default_modes() -> List[ModeSpec]:
    return [
        ModeSpec(label="five_finger", weight=0.5),
        ModeSpec(label="four_finger", weight=0.5, missing_fingers=["pinky"], palette="dark"),
    ]


class LandscapeConfig(_Section):
    """
    Candidate hands and their mixture weights.

    buckets optionally restricts which mode labels populate a view
    bucket, e.g. {"back": ["four_finger"]}; buckets not listed get all
    modes. Weights are renormalized inside each bucket.
    """

    modes: List[ModeSpec] = Field(default_factory=_default_modes)
    buckets: Dict[str, List[str]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_modes(self) -> "LandscapeConfig":
        labels = [m.label for m in self.modes]
        if not labels:
            raise ValueError("landscape needs at least one mode")
        if len(set(labels)) != len(labels):
            raise ValueError(f"mode labels must be unique, got {labels}")
        total = sum(m.weight for m in self.modes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mode weights must sum to 1, got {total}")
        for bucket, names in self.buckets.items():
            if bucket not in VIEW_BUCKETS:
                raise ValueError(f"unknown view bucket {bucket!r}")
            for name in names:
                if name not in labels:
                    raise ValueError(f"bucket {bucket!r} lists unknown mode {name!r}")
        return self


class LossConfig(_Section):
    lambda_sds: float = Field(default=1.0, ge=0.0)
    lambda_img: float = Field(default=0.01, ge=0.0)
    lambda_zvar: float = Field(default=100.0, ge=0.0)


class TogglesConfig(_Section):
    """Component switches; any combination is valid."""

    skeleton_condition: bool = True
    shape_init: bool = True
    chs_loss: bool = True
    sds: bool = True
    img_loss: bool = True
    zvar_loss: bool = True


class OptimConfig(_Section):
    stage1_iters: int = Field(default=500, ge=0)
    stage2_iters: int = Field(default=2000, ge=0)
    stage1_lr: float = Field(default=5e-2, gt=0.0)
    lr: float = Field(default=1e-2, gt=0.0)
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.99])
    eps: float = Field(default=1e-8, gt=0.0)
    init_cache: Optional[str] = Field(
        default=None, description="Field snapshot reused instead of running stage 1."
    )
    log_every: int = Field(default=100, ge=1)

    @field_validator("betas")
    @classmethod
    def _check_betas(cls, v: List[float]) -> List[float]:
        if len(v) != 2 or not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas must be two values in [0, 1), got {v}")
        return v


class ReportConfig(_Section):
    timing: bool = Field(default=False, description="Record wall time in the seconds column.")
    snapshots: bool = Field(default=True, description="Emit normal-shaded surface snapshots.")


class GradFieldConfig(_Section):
    camera: int = Field(default=0, ge=0, description="Index into the camera ring.")
    t_values: List[int] = Field(default_factory=lambda: [50, 600])
    draws: int = Field(default=20, ge=1)


class ExperimentConfig(_Section):
    """
    Top-level experiment description.

    Any field can be overridden from YAML, e.g.:

    seed: 3
    toggles:
      shape_init: false
    optim:
      stage2_iters: 8000
    """

    seed: int = 0
    output_dir: str = "default"
    field: FieldConfig = Field(default_factory=FieldConfig)
    cameras: CameraConfig = Field(default_factory=CameraConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    hand: HandConfig = Field(default_factory=HandConfig)
    landscape: LandscapeConfig = Field(default_factory=LandscapeConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    toggles: TogglesConfig = Field(default_factory=TogglesConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    gradfield: GradFieldConfig = Field(default_factory=GradFieldConfig)

    @model_validator(mode="after")
    def _check_cross_section(self) -> "ExperimentConfig":
        if self.cameras.image_size % self.codec.latent_size != 0:
            raise ValueError(
                f"cameras.image_size ({self.cameras.image_size}) must be a multiple of "
                f"codec.latent_size ({self.codec.latent_size})"
            )
        if self.hand.label not in {m.label for m in self.landscape.modes}:
            raise ValueError(f"hand.label {self.hand.label!r} is not a landscape mode")
        n_cameras = self.cameras.count * len(self.cameras.elevations)
        if self.gradfield.camera >= n_cameras:
            raise ValueError(f"gradfield.camera {self.gradfield.camera} >= number of cameras {n_cameras}")
        for t in self.gradfield.t_values:
            if not (1 <= t <= self.schedule.num_steps):
                raise ValueError(f"gradfield timestep {t} outside [1, {self.schedule.num_steps}]")
        return self

    def with_updates(self, **sections: Any) -> "ExperimentConfig":
        """Copy with fields replaced; dicts update sections, scalars replace values."""
        data = self.model_dump()
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
        return ExperimentConfig.model_validate(data)

    def run_dir(self) -> Path:
        out = Path(self.output_dir)
        return out if out.is_absolute() else output_root() / out


# -------------------------------------------------------------------
# YAML loading helpers
# -------------------------------------------------------------------


def _load_yaml(path: Path) -> Dict[str, Any]:
    """
    Load a YAML file into a plain dict.

    An empty file gives an empty dict (all defaults).
    """
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")

    with path.open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Expected a mapping at top level in {path}, got {type(data)}")
    return data


def parse_experiment_config(text: str) -> ExperimentConfig:
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Expected a mapping at top level, got {type(data)}")
    return ExperimentConfig.model_validate(data)


def dump_experiment_config(cfg: ExperimentConfig) -> str:
    """YAML text that parse_experiment_config turns back into an equal config."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False, allow_unicode=True)


def load_experiment_config(path: Optional[Path] = None) -> ExperimentConfig:
    """
    Load an experiment description from YAML and merge it with the
    defaults defined in ExperimentConfig.

    - If 'path' is None, configs/default.yaml is used.
    - Missing fields fall back to the defaults from the Pydantic models.
    - Unknown fields raise a pydantic ValidationError naming them.
    """
    cfg_path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    return ExperimentConfig.model_validate(_load_yaml(cfg_path))
