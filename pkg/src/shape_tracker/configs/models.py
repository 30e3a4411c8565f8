"""
Validated configuration models. Defaults come from `settings`; run configs are TOML.
"""
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigError
from ..geometry import Intrinsics
from . import settings

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    w_shape: float = Field(settings.W_SHAPE, ge=0.0)
    max_iterations: int = Field(settings.BA_MAX_ITERATIONS, ge=1)
    reprojection_delta: float = Field(settings.REPROJ_HUBER_PX, gt=0.0)  # px
    shape_delta: Optional[float] = Field(None, gt=0.0)  # scene units; None = 2% of bbox diagonal
    tolerance: float = Field(settings.BA_REL_TOL, gt=0.0)
    initial_lambda: float = Field(1e-4, gt=0.0)
    pose_rounds: int = Field(settings.POSE_OPT_ROUNDS, ge=1)  # optimize-then-reflag rounds
    pose_iterations: int = Field(settings.POSE_OPT_ITERATIONS, ge=1)


class RegistrationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    huber_delta: float = Field(settings.REGISTRATION_HUBER_PX, gt=0.0)
    max_iterations: int = Field(settings.REGISTRATION_MAX_ITERATIONS, ge=1)
    rel_tol: float = Field(settings.REGISTRATION_REL_TOL, gt=0.0)
    depth_factors: Tuple[float, ...] = settings.REGISTRATION_DEPTH_FACTORS
    use_rotation_grid: bool = True
    workers: int = Field(1, ge=1)


class TrackerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dilation_px: Optional[int] = Field(None, ge=0)  # None = 5 px at 1280 width, scaled
    min_inliers: int = Field(settings.MIN_TRACKING_INLIERS, ge=6)
    min_init_points: int = Field(settings.MIN_INIT_POINTS, ge=1)
    keyframe_inlier_ratio: float = Field(settings.KEYFRAME_INLIER_RATIO, gt=0.0, le=1.0)
    max_frames_between_keyframes: int = Field(settings.MAX_FRAMES_BETWEEN_KEYFRAMES, ge=1)
    covisibility_min_shared: int = Field(settings.COVISIBILITY_MIN_SHARED, ge=1)
    local_window: int = Field(settings.LOCAL_WINDOW_SIZE, ge=1)
    min_parallax_deg: float = Field(settings.MIN_PARALLAX_DEG, ge=0.0)
    max_triangulation_error_px: float = Field(4.0, gt=0.0)
    match_window_px: float = Field(settings.MATCH_WINDOW_PX, gt=0.0)
    max_features: int = Field(settings.MAX_FEATURES, ge=1)
    fast_threshold: float = Field(settings.FAST_THRESHOLD, gt=0.0)
    surface_density: Optional[float] = Field(settings.SURFACE_DENSITY or None, gt=0.0)
    texture_on_keyframes: bool = True
    texture_every_frame: bool = False
    run_local_ba: bool = True
    cull_window: int = Field(3, ge=2)
    reloc_min_matches: int = Field(settings.MIN_TRACKING_INLIERS, ge=4)
    reloc_inlier_px: float = Field(3.0, gt=0.0)
    two_view_max_frames: int = Field(60, ge=2)
    parallel: bool = False
    mapping_queue_size: int = Field(settings.MAPPING_QUEUE_SIZE, ge=1)


class RunToggles(BaseModel):
    """The three ablation switches."""

    model_config = ConfigDict(extra="forbid")

    prior_init: bool = True
    pseudo_mask: bool = True
    shape_prior_ba: bool = True

    def flipped(self, name: str, value: Optional[bool] = None) -> "RunToggles":
        if name not in type(self).model_fields:
            raise ConfigError(f"unknown toggle '{name}'")
        current = getattr(self, name)
        return self.model_copy(update={name: (not current) if value is None else value})


class ImageInput(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_dir: Path
    mesh: Path
    intrinsics: Intrinsics
    t_init: Optional[Path] = None
    correspondences: Optional[Path] = None

    @model_validator(mode="after")
    def _one_pose_source(self) -> "ImageInput":
        if (self.t_init is None) == (self.correspondences is None):
            raise ValueError("exactly one of t_init / correspondences is required")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: Optional["ScenarioSpec"] = None
    images: Optional[ImageInput] = None
    toggles: RunToggles = RunToggles()
    optimizer: OptimizerConfig = OptimizerConfig()
    registration: RegistrationConfig = RegistrationConfig()
    tracker: TrackerConfig = TrackerConfig()
    seed: int = 0
    output_dir: Path = Path("runs/out")
    deterministic: bool = settings.DETERMINISTIC
    image_mode: bool = False  # scenario input: render images and run the detector path
    global_ba_at_end: bool = True
    save_plot: bool = True

    @model_validator(mode="after")
    def _one_input(self) -> "RunConfig":
        if (self.scenario is None) == (self.images is None):
            raise ValueError("exactly one input source (scenario or images) is required")
        return self

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.md5(payload.encode("utf-8")).hexdigest()

    @classmethod
    def from_toml(cls, path: Union[str, Path], **overrides) -> "RunConfig":
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """`[scenario] preset = "name"` expands a builtin scenario; other scenario keys override it."""
        data = dict(data)
        scenario = data.get("scenario")
        try:
            if isinstance(scenario, dict) and "preset" in scenario:
                updates = {k: v for k, v in scenario.items() if k != "preset"}
                data["scenario"] = ScenarioSpec.preset(scenario["preset"], **updates)
            return cls.model_validate(data)
        except (ValidationError, ValueError) as e:
            raise ConfigError(str(e))


from ..simulator import ScenarioSpec  # noqa: E402

RunConfig.model_rebuild()
