"""
Synthetic scenes with exact ground truth: an organ mesh moving in a lab frame, a static
background point cloud and a camera flying a spline path. Scripted events cover fast
motion, leaving the field of view, occlusion and organ-background relative motion.

Frames come out as FrameObservations (persistent feature ids, no labels) and,
optionally, as rendered grayscale images for the detector path.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Dict, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, Slerp

from .configs.settings import MIN_CORRESPONDENCES
from .features import FrameObservations, FrameSource, Observation
from .geometry import Intrinsics, Pose, look_at, project_points, rays_through_pixels
from .prior_shape import (
    TriangleMesh,
    load_mesh,
    make_bumpy_ellipsoid,
    make_ellipsoid,
    make_icosphere,
    render_depth,
)
from .utils.raster import NEAR_PLANE, clip_near, project_cam, rasterize_triangles

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

N_CORRESPONDENCES = 20
AMBIENT = 0.3
SPECKLE_CELL_DEG = 0.6
_SPECKLE_TABLE = 4096


# =====================
# Scenario models
# =====================

class OrganSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["icosphere", "ellipsoid", "bumpy_ellipsoid", "file"] = "icosphere"
    path: Optional[Path] = None
    radius: float = Field(1.0, gt=0.0)
    radii: Vec3 = (1.0, 0.8, 0.6)
    subdivisions: int = Field(5, ge=0, le=7)
    amplitude: float = Field(0.05, ge=0.0)
    shape_seed: int = 0

    @model_validator(mode="after")
    def _path_for_file(self) -> "OrganSpec":
        if self.kind == "file" and self.path is None:
            raise ValueError("organ kind 'file' needs a path")
        return self

    def build(self) -> TriangleMesh:
        if self.kind == "file":
            return load_mesh(self.path)
        if self.kind == "ellipsoid":
            return make_ellipsoid(self.radii, self.subdivisions)
        if self.kind == "bumpy_ellipsoid":
            return make_bumpy_ellipsoid(self.radii, self.amplitude, self.shape_seed, self.subdivisions)
        return make_icosphere(self.subdivisions, self.radius)


class BackgroundSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    count: int = Field(200, ge=0)
    box_min: Vec3 = (-5.0, -4.0, -4.5)
    box_max: Vec3 = (5.0, 4.0, -2.0)

    @model_validator(mode="after")
    def _ordered(self) -> "BackgroundSpec":
        if any(lo >= hi for lo, hi in zip(self.box_min, self.box_max)):
            raise ValueError("background box_min must be below box_max on every axis")
        return self


class Waypoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eye: Vec3
    speed: float = Field(1.0, gt=0.0)  # relative speed on the segment leaving this waypoint


def _orbit(azimuth_deg: float, elevation_deg: float, distance: float) -> Vec3:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    return (
        float(distance * np.sin(az) * np.cos(el)),
        float(distance * np.sin(el)),
        float(distance * np.cos(az) * np.cos(el)),
    )


def _default_waypoints() -> List[Waypoint]:
    path = [(0, 0, 4.0), (15, 8, 3.9), (30, 4, 4.1), (18, -6, 4.0), (-5, -10, 3.8),
            (-28, -2, 4.1), (-15, 8, 3.9), (0, 2, 4.0)]
    return [Waypoint(eye=_orbit(*p)) for p in path]


class CameraPathSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    waypoints: List[Waypoint] = Field(default_factory=_default_waypoints, min_length=2)
    target: Vec3 = (0.0, 0.0, 0.0)
    hold_frames: int = Field(0, ge=0)  # camera stays at the first waypoint (zero parallax)


class NoiseSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pixel_sigma: float = Field(1.0, ge=0.0)
    dropout: float = Field(0.0, ge=0.0, le=1.0)
    outlier: float = Field(0.0, ge=0.0, le=1.0)


class _Event(BaseModel):
    model_config = ConfigDict(extra="forbid")

    start_frame: int = Field(ge=0)
    duration_frames: int = Field(ge=1)

    def active(self, frame: int) -> bool:
        return self.start_frame <= frame < self.start_frame + self.duration_frames


class FastMotionEvent(_Event):
    kind: Literal["fast_motion"] = "fast_motion"
    speed_factor: float = Field(4.0, gt=0.0)


class OutOfFovEvent(_Event):
    kind: Literal["out_of_fov"] = "out_of_fov"
    angle_deg: float = Field(70.0, gt=0.0, le=180.0)
    ramp_frames: int = Field(10, ge=0)


class OcclusionEvent(_Event):
    kind: Literal["occlusion"] = "occlusion"
    rect: Optional[Tuple[float, float, float, float]] = None  # (u0, v0, u1, v1); None = whole image


class OrganMotionEvent(_Event):
    kind: Literal["organ_motion"] = "organ_motion"
    duration_frames: int = Field(150, ge=1)
    rotation_deg: Vec3 = (0.0, 15.0, 0.0)  # rotation vector, degrees
    translation: Vec3 = (0.15, 0.0, 0.0)


ScenarioEvent = Annotated[
    Union[FastMotionEvent, OutOfFovEvent, OcclusionEvent, OrganMotionEvent],
    Field(discriminator="kind"),
]


def _default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=900.0, fy=900.0, cx=640.0, cy=360.0, width=1280, height=720)


class ScenarioSpec(BaseModel):
    """Everything needed to regenerate a scene, bit for bit, from its seed."""

    model_config = ConfigDict(extra="forbid")

    organ: OrganSpec = OrganSpec()
    background: BackgroundSpec = BackgroundSpec()
    markers: Optional[List[Vec3]] = Field(None, min_length=3, max_length=3)  # organ frame
    camera: CameraPathSpec = CameraPathSpec()
    events: List[ScenarioEvent] = Field(default_factory=list)
    noise: NoiseSpec = NoiseSpec()
    organ_features: int = Field(300, ge=0)
    n_frames: int = Field(1000, ge=1)
    frame_rate: float = Field(30.0, gt=0.0)
    intrinsics: Intrinsics = Field(default_factory=_default_intrinsics)
    albedo: Optional[float] = Field(None, ge=0.0, le=255.0)  # constant organ albedo; None = seeded texture
    light_direction: Vec3 = (0.3, -0.5, 1.0)
    shading: bool = True  # off renders the raw albedo
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **updates) -> "ScenarioSpec":
        """Builtin scenarios: default, organ_motion, out_of_fov, occlusion, fast_motion, zero_parallax."""
        if name not in PRESETS:
            raise ValueError(f"unknown scenario preset '{name}' (choose from {sorted(PRESETS)})")
        data = {**PRESETS[name], **updates}
        return cls.model_validate(data)


PRESETS: Dict[str, dict] = {
    "default": {},
    "organ_motion": {
        "n_frames": 600,
        "events": [
            {"kind": "organ_motion", "start_frame": 120, "duration_frames": 150,
             "rotation_deg": (0.0, 20.0, 0.0), "translation": (0.2, 0.0, 0.0)},
            {"kind": "organ_motion", "start_frame": 360, "duration_frames": 150,
             "rotation_deg": (10.0, -15.0, 0.0), "translation": (-0.15, 0.1, 0.0)},
        ],
        "background": {"count": 400},
    },
    "out_of_fov": {
        "n_frames": 400,
        "events": [{"kind": "out_of_fov", "start_frame": 150, "duration_frames": 40}],
    },
    "occlusion": {
        "n_frames": 300,
        "events": [{"kind": "occlusion", "start_frame": 120, "duration_frames": 30}],
    },
    "fast_motion": {
        "n_frames": 400,
        "events": [{"kind": "fast_motion", "start_frame": 150, "duration_frames": 40, "speed_factor": 4.0}],
    },
    "zero_parallax": {
        "n_frames": 200,
        "camera": {"hold_frames": 120},
    },
}


# =====================
# Ground truth
# =====================

@dataclass
class GroundTruth:
    """
    Lab-frame trajectories plus the organ-frame quantity the tracker estimates.

    `camera_poses` are lab->camera, `organ_poses` organ->lab and `relative_poses`
    organ->camera. `points` hold organ-frame coordinates for organ features and
    lab-frame coordinates for background features (`is_organ` tells them apart).
    """

    k: Intrinsics
    frame_times: np.ndarray
    camera_poses: List[Pose]
    organ_poses: List[Pose]
    relative_poses: List[Pose]
    points: np.ndarray
    normals: np.ndarray
    is_organ: np.ndarray
    markers: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.frame_times)

    def marker_pixels(self, frame: int) -> np.ndarray:
        pixels, _ = project_points(self.relative_poses[frame], self.k, self.markers)
        return pixels


def relative_poses(camera_poses: List[Pose], organ_poses: List[Pose]) -> List[Pose]:
    """organ->camera pose per frame: the lab->camera view applied after organ->lab."""
    return [cam.compose(organ) for cam, organ in zip(camera_poses, organ_poses)]


@dataclass
class Scenario:
    spec: ScenarioSpec
    mesh: TriangleMesh
    ground_truth: GroundTruth
    t_init: Pose
    correspondence_points: np.ndarray
    correspondence_pixels: np.ndarray
    frames: List[FrameObservations] = field(default_factory=list)

    @property
    def k(self) -> Intrinsics:
        return self.spec.intrinsics


def _path_parameter(spec: ScenarioSpec) -> np.ndarray:
    """Normalized path position in [0, 1] per frame; fast-motion bursts advance faster."""
    steps = np.ones(spec.n_frames)
    for event in spec.events:
        if isinstance(event, FastMotionEvent):
            window = slice(event.start_frame, event.start_frame + event.duration_frames)
            steps[window] *= event.speed_factor
    steps[: spec.camera.hold_frames] = 0.0
    s = np.concatenate([[0.0], np.cumsum(steps[:-1])])
    return s / s[-1] if s[-1] > 0 else s


def _camera_path(spec: ScenarioSpec) -> List[Pose]:
    eyes = np.array([w.eye for w in spec.camera.waypoints], dtype=float)
    lengths = np.linalg.norm(np.diff(eyes, axis=0), axis=1)
    speeds = np.array([w.speed for w in spec.camera.waypoints[:-1]])
    knots = np.concatenate([[0.0], np.cumsum(np.maximum(lengths, 1e-9) / speeds)])
    spline = CubicSpline(knots / knots[-1], eyes, bc_type="natural")
    eye_track = spline(_path_parameter(spec))

    target = np.asarray(spec.camera.target, dtype=float)
    views = [look_at(eye, target) for eye in eye_track]

    yaw = np.zeros(spec.n_frames)
    for event in spec.events:
        if isinstance(event, OutOfFovEvent):
            yaw = np.maximum(yaw, _fov_excursion(event, spec.n_frames))
    return [
        Pose.from_rotvec([0.0, y, 0.0], np.zeros(3)).compose(view) if y > 0 else view
        for view, y in zip(views, yaw)
    ]


def _fov_excursion(event: OutOfFovEvent, n_frames: int) -> np.ndarray:
    """Camera yaw (radians) per frame: full angle inside the window, cosine ramps outside it."""
    frames = np.arange(n_frames, dtype=float)
    start, end = event.start_frame, event.start_frame + event.duration_frames
    ramp = max(event.ramp_frames, 1)
    before = np.clip((frames - (start - ramp)) / ramp, 0.0, 1.0)
    after = np.clip(((end - 1 + ramp) - frames) / ramp, 0.0, 1.0)
    level = np.minimum(before, after)
    return np.radians(event.angle_deg) * 0.5 * (1.0 - np.cos(np.pi * level))


def _organ_path(spec: ScenarioSpec) -> List[Pose]:
    poses = [Pose.identity()] * spec.n_frames
    frames = np.arange(spec.n_frames, dtype=float)
    for event in spec.events:
        if not isinstance(event, OrganMotionEvent):
            continue
        x = np.clip((frames - event.start_frame) / event.duration_frames, 0.0, 1.0)
        fraction = x * x * (3.0 - 2.0 * x)  # smoothstep
        slerp = Slerp([0.0, 1.0], Rotation.from_rotvec([np.zeros(3), np.radians(event.rotation_deg)]))
        rotations = slerp(fraction).as_quat()
        translation = np.asarray(event.translation, dtype=float)
        poses = [Pose(q, f * translation).compose(p) for q, f, p in zip(rotations, fraction, poses)]
    return poses


def _sample_organ(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    areas = mesh.face_areas
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.face_vertices[faces]
    points = (
        (1.0 - r1)[:, None] * tri[:, 0] + (r1 * (1.0 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    )
    return points, mesh.face_normals[faces]


def _auto_markers(mesh: TriangleMesh, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Three surface points hit by rays around the image centre of frame 0."""
    offsets = np.array([[0.0, 0.0], [-0.08, 0.06], [0.08, 0.06]]) * k.width
    pixels = np.array([k.cx, k.cy]) + offsets
    depth = render_depth(mesh, pose, k, pixels)
    hit = ~np.isnan(depth)
    if not hit.all():
        logger.warning("[Simulator] Marker rays missed the organ; falling back to vertices")
        ids = np.argsort(np.linalg.norm(mesh.vertices - pose.camera_center(), axis=1))[:3]
        return mesh.vertices[ids].copy()
    xy = k.normalize(pixels)
    cam = np.column_stack([xy * depth[:, None], depth])
    return pose.inverse().transform(cam)


def build_ground_truth(spec: ScenarioSpec, mesh: Optional[TriangleMesh] = None) -> Tuple[TriangleMesh, GroundTruth]:
    mesh = mesh or spec.organ.build()
    rng = np.random.default_rng(spec.seed)
    organ_points, organ_normals = _sample_organ(mesh, spec.organ_features, rng)
    lo, hi = np.asarray(spec.background.box_min), np.asarray(spec.background.box_max)
    background = lo + rng.random((spec.background.count, 3)) * (hi - lo)

    camera_poses = _camera_path(spec)
    organ_poses = _organ_path(spec)
    relative = relative_poses(camera_poses, organ_poses)
    markers = (
        np.array(spec.markers, dtype=float) if spec.markers is not None
        else _auto_markers(mesh, relative[0], spec.intrinsics)
    )
    gt = GroundTruth(
        k=spec.intrinsics,
        frame_times=np.arange(spec.n_frames) / spec.frame_rate,
        camera_poses=camera_poses,
        organ_poses=organ_poses,
        relative_poses=relative,
        points=np.vstack([organ_points, background]),
        normals=np.vstack([organ_normals, np.zeros_like(background)]),
        is_organ=np.concatenate([np.ones(len(organ_points), bool), np.zeros(len(background), bool)]),
        markers=markers,
    )
    return mesh, gt


# =====================
# Observation stream
# =====================

def visible_features(mesh: TriangleMesh, gt: GroundTruth, frame: int) -> Tuple[np.ndarray, np.ndarray]:
    """(feature ids, noise-free pixels) of the features the camera sees in `frame`."""
    k = gt.k
    rel = gt.relative_poses[frame]
    organ = gt.is_organ
    pixels = np.full((len(gt.points), 2), np.nan)
    visible = np.zeros(len(gt.points), dtype=bool)

    if organ.any():
        px, front = project_points(rel, k, gt.points[organ])
        facing = np.einsum("ij,ij->i", rel.camera_center() - gt.points[organ], gt.normals[organ]) > 0
        pixels[organ] = px
        visible[organ] = front & facing & k.in_bounds(px)

    if (~organ).any():
        view = gt.camera_poses[frame]
        px, front = project_points(view, k, gt.points[~organ])
        ok = front & k.in_bounds(np.nan_to_num(px, nan=-1.0))
        ids = np.nonzero(~organ)[0]
        pixels[ids] = px
        visible[ids] = ok
        candidates = ids[ok]
        if len(candidates):
            cand_px = pixels[candidates]
            verts, v_front = project_points(rel, k, mesh.vertices)
            if v_front.all():
                lo, hi = np.nanmin(verts, axis=0) - 1, np.nanmax(verts, axis=0) + 1
                near = np.all((cand_px >= lo) & (cand_px <= hi), axis=1)
            else:
                near = np.ones(len(candidates), dtype=bool)
            if near.any():
                organ_depth = render_depth(mesh, rel, k, cand_px[near])
                bg_depth = view.transform(gt.points[candidates[near]])[:, 2]
                occluded = ~np.isnan(organ_depth) & (organ_depth < bg_depth)
                visible[candidates[near][occluded]] = False

    ids = np.nonzero(visible)[0]
    return ids, pixels[ids]


def _frame_observations(
    spec: ScenarioSpec, mesh: TriangleMesh, gt: GroundTruth, frame: int
) -> FrameObservations:
    k = spec.intrinsics
    rng = np.random.default_rng([spec.seed, 1, frame])
    ids, true_px = visible_features(mesh, gt, frame)

    for event in spec.events:
        if isinstance(event, OcclusionEvent) and event.active(frame):
            u0, v0, u1, v1 = event.rect if event.rect is not None else (0, 0, k.width, k.height)
            inside = (true_px[:, 0] >= u0) & (true_px[:, 0] <= u1) & (true_px[:, 1] >= v0) & (true_px[:, 1] <= v1)
            ids, true_px = ids[~inside], true_px[~inside]

    n = len(ids)
    dropped = rng.random(n) < spec.noise.dropout
    outlier = rng.random(n) < spec.noise.outlier
    noise = rng.normal(0.0, 1.0, size=(n, 2)) * spec.noise.pixel_sigma
    random_px = rng.random((n, 2)) * np.array([k.width - 1, k.height - 1])

    pixels = true_px + noise if spec.noise.pixel_sigma > 0 else true_px.copy()
    pixels[outlier] = random_px[outlier]
    keep = ~dropped & k.in_bounds(pixels)
    observations = [
        Observation(frame, pixels[i].copy(), int(ids[i])) for i in np.nonzero(keep)[0]
    ]
    return FrameObservations(frame, float(gt.frame_times[frame]), observations, FrameSource.SIMULATOR)


def stream_frames(spec: ScenarioSpec, mesh: TriangleMesh, gt: GroundTruth) -> Iterator[FrameObservations]:
    """Per-frame observations; each frame has its own seeded generator so streaming is replayable."""
    for frame in range(spec.n_frames):
        yield _frame_observations(spec, mesh, gt, frame)


def generate_scenario(spec: ScenarioSpec, stream: bool = False) -> Scenario:
    """
    Ground truth, T_init (exact frame-0 organ->camera pose), 20 exact frame-0
    correspondences and, unless `stream`, the full observation sequence.
    """
    mesh, gt = build_ground_truth(spec)
    t_init = gt.relative_poses[0]

    ids, pixels = visible_features(mesh, gt, 0)
    organ_ids = ids[gt.is_organ[ids]]
    organ_px = pixels[gt.is_organ[ids]]
    n_corr = min(N_CORRESPONDENCES, len(organ_ids))
    if n_corr < MIN_CORRESPONDENCES:
        logger.warning(f"[Simulator] only {n_corr} organ features visible in frame 0")
    scenario = Scenario(
        spec=spec,
        mesh=mesh,
        ground_truth=gt,
        t_init=t_init,
        correspondence_points=gt.points[organ_ids[:n_corr]].copy(),
        correspondence_pixels=organ_px[:n_corr].copy(),
    )
    if not stream:
        scenario.frames = list(stream_frames(spec, mesh, gt))
        n_obs = sum(len(f) for f in scenario.frames)
        logger.info(f"[Simulator] {spec.n_frames} frames, {n_obs} observations, {len(gt.points)} features")
    return scenario


# =====================
# Image rendering
# =====================

@dataclass
class RenderedFrame:
    image: np.ndarray
    silhouette: np.ndarray


class SyntheticRenderer:
    """Z-buffered Lambertian rendering of the organ over a lab-fixed speckle backdrop."""

    def __init__(self, spec: ScenarioSpec, mesh: TriangleMesh, gt: GroundTruth):
        self.spec = spec
        self.mesh = mesh
        self.gt = gt
        rng = np.random.default_rng([spec.seed, 2])
        if spec.albedo is None:
            self.albedo = rng.uniform(60.0, 220.0, size=len(mesh.faces))
        else:
            self.albedo = np.full(len(mesh.faces), float(spec.albedo))
        self.speckle = rng.uniform(30.0, 200.0, size=_SPECKLE_TABLE)
        light = np.asarray(spec.light_direction, dtype=float)
        self.light = light / np.linalg.norm(light)

    def _backdrop(self, view: Pose) -> np.ndarray:
        k = self.spec.intrinsics
        cols, rows = np.meshgrid(np.arange(k.width), np.arange(k.height))
        pixels = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(float)
        _, d = rays_through_pixels(view, k, pixels)
        az = np.degrees(np.arctan2(d[:, 0], -d[:, 2]))
        el = np.degrees(np.arcsin(np.clip(d[:, 1], -1.0, 1.0)))
        i = np.floor(az / SPECKLE_CELL_DEG).astype(np.int64)
        j = np.floor(el / SPECKLE_CELL_DEG).astype(np.int64)
        cell = ((i * 73856093) ^ (j * 19349663)) % _SPECKLE_TABLE
        return self.speckle[cell].reshape(k.height, k.width)

    def render(self, frame: int) -> RenderedFrame:
        k = self.spec.intrinsics
        rel = self.gt.relative_poses[frame]
        image = self._backdrop(self.gt.camera_poses[frame])

        cam_vertices = rel.transform(self.mesh.vertices)
        cam_tris = cam_vertices[self.mesh.faces]
        facing = np.einsum("ij,ij->i", self.mesh.face_normals @ rel.rotation.T, cam_tris[:, 0]) < 0
        face_ids = np.nonzero(facing)[0]
        clipped, source = clip_near(cam_tris[face_ids], NEAR_PLANE)
        tri2d = project_cam(clipped, k.fx, k.fy, k.cx, k.cy)
        tri_idx, rows, cols, bary = rasterize_triangles(tri2d, k.width, k.height, with_barycentric=True)

        silhouette = np.zeros((k.height, k.width), dtype=bool)
        if len(tri_idx):
            inv_z = np.einsum("ij,ij->i", bary, 1.0 / clipped[tri_idx, :, 2])
            order = np.lexsort((-inv_z, rows * k.width + cols))
            flat = (rows * k.width + cols)[order]
            _, first = np.unique(flat, return_index=True)
            nearest = order[first]
            faces = face_ids[source[tri_idx[nearest]]]

            shade = self.albedo[faces]
            if self.spec.shading:
                organ_rotation = self.gt.organ_poses[frame].rotation
                normals_lab = self.mesh.face_normals[faces] @ organ_rotation.T
                lambert = np.clip(normals_lab @ self.light, 0.0, 1.0)
                shade = shade * (AMBIENT + (1.0 - AMBIENT) * lambert)
            image[rows[nearest], cols[nearest]] = shade
            silhouette[rows[nearest], cols[nearest]] = True

        return RenderedFrame(np.clip(np.rint(image), 0, 255).astype(np.uint8), silhouette)


def render_synthetic_images(
    spec: ScenarioSpec, gt: GroundTruth, mesh: Optional[TriangleMesh] = None
) -> Iterator[np.ndarray]:
    """Grayscale uint8 frames; deterministic given the scenario seed."""
    renderer = SyntheticRenderer(spec, mesh or spec.organ.build(), gt)
    for frame in range(gt.n_frames):
        yield renderer.render(frame).image
