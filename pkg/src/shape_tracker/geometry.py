"""
Camera model, rigid transforms and the small geometric kernels every other module uses.

Pose convention: world (pre-operative mesh frame) -> camera, point_cam = R @ point_world + t.
Pixels are continuous coordinates whose integer values are pixel centres.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, DegenerateParallax, Miss, OutOfBounds

MIN_DEPTH = 1e-9
MIN_HIT_DISTANCE = 1e-9


class Intrinsics(BaseModel):
    """Pinhole intrinsics of a pre-rectified camera."""

    model_config = ConfigDict(frozen=True)

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @model_validator(mode="after")
    def _check(self) -> "Intrinsics":
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        return self

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_bounds(self, pixels: np.ndarray) -> np.ndarray:
        """Bounds test on pixel-centre coordinates, vectorized over the leading axes."""
        pixels = np.asarray(pixels, dtype=float)
        u, v = pixels[..., 0], pixels[..., 1]
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        return np.stack(
            [(pixels[..., 0] - self.cx) / self.fx, (pixels[..., 1] - self.cy) / self.fy], axis=-1
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform in SE(3) stored as a unit quaternion (x, y, z, w) plus translation."""

    quaternion: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / norm
        t = np.array(self.translation, dtype=float).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        return cls(Rotation.from_matrix(np.asarray(rotation, dtype=float)).as_quat(), translation)

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray, translation: np.ndarray) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat(), translation)

    @classmethod
    def from_matrix34(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=float).reshape(3, 4)
        return cls.from_rt(matrix[:, :3], matrix[:, 3])

    @cached_property
    def rotation(self) -> np.ndarray:
        r = Rotation.from_quat(self.quaternion).as_matrix()
        r.setflags(write=False)
        return r

    @property
    def rotvec(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternion).as_rotvec()

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def matrix44(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :4] = self.matrix34()
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply `other` first, then `self`."""
        q = (Rotation.from_quat(self.quaternion) * Rotation.from_quat(other.quaternion)).as_quat()
        return Pose(q, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        r_inv = Rotation.from_quat(self.quaternion).inv()
        return Pose(r_inv.as_quat(), -(r_inv.as_matrix() @ self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        return -(self.rotation.T @ self.translation)

    def retract(self, delta: np.ndarray) -> "Pose":
        """Left-multiplicative update Exp(delta) o self with delta = (omega, v)."""
        delta = np.asarray(delta, dtype=float)
        r_delta = Rotation.from_rotvec(delta[:3])
        q = (r_delta * Rotation.from_quat(self.quaternion)).as_quat()
        return Pose(q, r_delta.apply(self.translation) + delta[3:])

    def angle_to(self, other: "Pose") -> float:
        """Geodesic rotation distance in radians."""
        rel = Rotation.from_quat(self.quaternion).inv() * Rotation.from_quat(other.quaternion)
        return float(np.linalg.norm(rel.as_rotvec()))

    def __repr__(self) -> str:
        return f"Pose(rotvec={np.round(self.rotvec, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def look_at(eye: np.ndarray, target: np.ndarray, down: np.ndarray = (0.0, -1.0, 0.0)) -> Pose:
    """World->camera pose of a camera at `eye` looking at `target`; `down` maps to image +v."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=float), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rotation = np.stack([x, y, z])
    return Pose.from_rt(rotation, -rotation @ eye)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.direction, dtype=float).reshape(3)
        norm = np.linalg.norm(d)
        if norm < 1e-15:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "direction", d / norm)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def project_points(pose: Pose, k: Intrinsics, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project N world points; returns (pixels, in_front). Pixels behind the camera are NaN."""
    cam = pose.transform(np.atleast_2d(points))
    in_front = cam[:, 2] > MIN_DEPTH
    z = np.where(in_front, cam[:, 2], np.nan)
    pixels = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)
    return pixels, in_front


def project_point(pose: Pose, k: Intrinsics, point: np.ndarray) -> np.ndarray:
    cam = pose.transform(np.asarray(point, dtype=float).reshape(3))
    if cam[2] <= MIN_DEPTH:
        raise BehindCamera(f"camera-frame depth {cam[2]:.3g} <= {MIN_DEPTH}")
    return np.array([k.fx * cam[0] / cam[2] + k.cx, k.fy * cam[1] / cam[2] + k.cy])


def pixel_bearings(k: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame bearings through pixels."""
    xy = k.normalize(pixels)
    b = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def rays_through_pixels(pose: Pose, k: Intrinsics, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World-frame (origin, unit directions) for N pixels; no bounds check."""
    directions = pixel_bearings(k, np.atleast_2d(pixels)) @ pose.rotation
    return pose.camera_center(), directions


def ray_through_pixel(pose: Pose, k: Intrinsics, pixel: np.ndarray) -> Ray:
    pixel = np.asarray(pixel, dtype=float).reshape(2)
    if not k.in_bounds(pixel):
        raise OutOfBounds(f"pixel {pixel.tolist()} outside {k.width}x{k.height}")
    origin, directions = rays_through_pixels(pose, k, pixel[None, :])
    return Ray(origin, directions[0])


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit products keep per-element arithmetic identical across batch shapes
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def intersect_rays_triangles(
    origins: np.ndarray, directions: np.ndarray, v0: np.ndarray, v1: np.ndarray, v2: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Broadcast Moller-Trumbore. Ray arrays (..., 3) are broadcast against triangle arrays.

    Returns (t, u, v); t is NaN where the ray misses.
    """
    e1 = v1 - v0
    e2 = v2 - v0
    p = _cross(directions, e2)
    det = _dot(e1, p)
    scale = np.sqrt(_dot(e1, e1) * _dot(e2, e2))
    parallel = np.abs(det) <= 1e-12 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(parallel, 1.0, det)
        s = origins - v0
        u = _dot(s, p) * inv
        q = _cross(s, e1)
        v = _dot(directions, q) * inv
        t = _dot(e2, q) * inv
    hit = ~parallel & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > MIN_HIT_DISTANCE)
    return np.where(hit, t, np.nan), u, v


def ray_triangle_intersect(
    ray: Ray, v0: np.ndarray, v1: np.ndarray, v2: np.ndarray
) -> Tuple[float, np.ndarray]:
    v0, v1, v2 = (np.asarray(v, dtype=float).reshape(3) for v in (v0, v1, v2))
    if 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0)) <= 1e-12:
        raise ValueError("degenerate triangle")
    t, u, v = intersect_rays_triangles(ray.origin, ray.direction, v0, v1, v2)
    if np.isnan(t):
        raise Miss("ray misses triangle")
    return float(t), np.array([float(u), float(v)])


def parallax_angle(pose_a: Pose, pose_b: Pose, k: Intrinsics, pixel_a: np.ndarray, pixel_b: np.ndarray) -> float:
    """Angle in degrees between the two viewing rays."""
    da = pixel_bearings(k, np.asarray(pixel_a, dtype=float)) @ pose_a.rotation
    db = pixel_bearings(k, np.asarray(pixel_b, dtype=float)) @ pose_b.rotation
    return float(np.degrees(np.arccos(np.clip(np.dot(da, db), -1.0, 1.0))))


def triangulate(
    pose_a: Pose,
    pose_b: Pose,
    pixel_a: np.ndarray,
    pixel_b: np.ndarray,
    k: Intrinsics,
    min_parallax_deg: float = 0.5,
) -> Tuple[np.ndarray, float]:
    """Linear (DLT) two-view triangulation. Returns (world point, parallax in degrees)."""
    pixel_a = np.asarray(pixel_a, dtype=float).reshape(2)
    pixel_b = np.asarray(pixel_b, dtype=float).reshape(2)
    if not (k.in_bounds(pixel_a) and k.in_bounds(pixel_b)):
        raise OutOfBounds("triangulation pixels must lie inside the image")
    parallax = parallax_angle(pose_a, pose_b, k, pixel_a, pixel_b)
    if parallax < min_parallax_deg:
        raise DegenerateParallax(f"parallax {parallax:.3f} deg < {min_parallax_deg}", parallax)

    xa, xb = k.normalize(pixel_a), k.normalize(pixel_b)
    pa, pb = pose_a.matrix34(), pose_b.matrix34()
    a = np.stack([xa[0] * pa[2] - pa[0], xa[1] * pa[2] - pa[1], xb[0] * pb[2] - pb[0], xb[1] * pb[2] - pb[1]])
    _, _, vt = np.linalg.svd(a)
    h = vt[-1]
    if abs(h[3]) < 1e-15:
        raise DegenerateParallax("point at infinity", parallax)
    point = h[:3] / h[3]
    if pose_a.transform(point)[2] <= MIN_DEPTH or pose_b.transform(point)[2] <= MIN_DEPTH:
        raise BehindCamera("triangulated point behind a camera")
    return point, parallax
