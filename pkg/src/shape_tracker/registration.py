"""
Initial 3D-2D registration of the prior mesh from point correspondences.

Deterministic multi-start: every rotation of the octahedral group combined with a few
depth guesses seeds a robust Levenberg-Marquardt run, and the start with the lowest
RMS pixel residual wins (ties by seed id).
"""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .configs.models import RegistrationConfig
from .configs.settings import MIN_CORRESPONDENCES
from .errors import DegenerateConfiguration, OutOfBounds, TooFewPoints
from .geometry import Intrinsics, Pose, pixel_bearings
from .optimizer import RobustKernel, refine_pose_lm, reprojection_residuals

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Correspondence:
    point3: np.ndarray
    pixel: np.ndarray
    id: int = 0


@dataclass
class RegistrationResult:
    pose: Pose
    rms_px: float
    per_start_residuals: List[Tuple[int, float]] = field(default_factory=list)
    converged: bool = True
    winning_seed: int = 0


def octahedral_rotations() -> List[np.ndarray]:
    """The 24 signed permutation matrices with determinant +1, in a fixed order."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            m[np.arange(3), perm] = signs
            if np.linalg.det(m) > 0:
                out.append(m)
    return out


def _check_inputs(corrs: Sequence[Correspondence], k: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    if len(corrs) < MIN_CORRESPONDENCES:
        raise TooFewPoints(f"{len(corrs)} correspondences, need >= {MIN_CORRESPONDENCES}")
    points = np.array([c.point3 for c in corrs], dtype=float).reshape(-1, 3)
    pixels = np.array([c.pixel for c in corrs], dtype=float).reshape(-1, 2)
    if not np.all(k.in_bounds(pixels)):
        raise OutOfBounds("correspondence pixels must lie inside the image")
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[0] <= 1e-12 or s[1] <= 1e-9 * s[0]:
        raise DegenerateConfiguration("3D points are collinear or coincident")
    return points, pixels


def _seed_poses(points: np.ndarray, pixels: np.ndarray, k: Intrinsics, config: RegistrationConfig) -> List[Pose]:
    centroid = points.mean(axis=0)
    spread_3d = np.sqrt(np.mean(np.sum((points - centroid) ** 2, axis=1)))
    spread_2d = np.sqrt(np.mean(np.sum((pixels - pixels.mean(axis=0)) ** 2, axis=1)))
    focal = 0.5 * (k.fx + k.fy)
    depth = focal * spread_3d / spread_2d if spread_2d > 1e-9 else max(spread_3d, 1.0)
    bearing = pixel_bearings(k, pixels.mean(axis=0))
    axis = bearing / bearing[2]

    seeds = []
    for rotation in octahedral_rotations():
        for factor in config.depth_factors:
            # camera-frame centroid on the ray through the mean pixel
            seeds.append(Pose.from_rt(rotation, factor * depth * axis - rotation @ centroid))
    return seeds


def _rms(pose: Pose, points: np.ndarray, pixels: np.ndarray, k: Intrinsics) -> float:
    e = reprojection_residuals(pose, k, points, pixels)
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


def solve_initial_registration(
    corrs: Sequence[Correspondence],
    k: Intrinsics,
    config: Optional[RegistrationConfig] = None,
    extra_seeds: Sequence[Pose] = (),
) -> RegistrationResult:
    """
    Robust multi-start registration minimizing the pixel reprojection error.

    `extra_seeds` are tried before the rotation grid. When no start converges the best
    one is still returned, with `converged=False`.
    """
    config = config or RegistrationConfig()
    points, pixels = _check_inputs(corrs, k)
    seeds = list(extra_seeds)
    if config.use_rotation_grid:
        seeds += _seed_poses(points, pixels, k, config)
    if not seeds:
        raise ValueError("no registration seeds: enable the rotation grid or pass extra seeds")
    kernel = RobustKernel.huber(config.huber_delta)

    def run(seed: Pose):
        fit = refine_pose_lm(
            points, pixels, k, seed, kernel,
            max_iterations=config.max_iterations,
            rel_tol=config.rel_tol,
        )
        return fit, _rms(fit.pose, points, pixels, k)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            results = list(executor.map(run, seeds))
    else:
        results = [run(seed) for seed in seeds]

    per_start = []
    best = 0
    for seed_id, (fit, rms) in enumerate(results):
        rms = rms if np.isfinite(rms) else float("inf")
        per_start.append((seed_id, rms))
        if rms < per_start[best][1]:
            best = seed_id

    fit, rms = results[best]
    if not fit.converged:
        logger.warning(f"[Registration] best start {best} did not converge (rms {rms:.3f} px)")
    logger.info(f"[Registration] {len(seeds)} starts, best seed {best}, rms {rms:.4f} px")
    return RegistrationResult(
        pose=fit.pose,
        rms_px=per_start[best][1],
        per_start_residuals=per_start,
        converged=fit.converged,
        winning_seed=best,
    )


def correspondences_from_arrays(points: np.ndarray, pixels: np.ndarray) -> List[Correspondence]:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    return [Correspondence(points[i].copy(), pixels[i].copy(), i) for i in range(len(points))]


def count_inliers(pose: Pose, points: np.ndarray, pixels: np.ndarray, k: Intrinsics, threshold_px: float) -> np.ndarray:
    """Boolean inlier flags for correspondences in front of the camera within `threshold_px`."""
    cam = pose.transform(np.atleast_2d(points))
    e = np.linalg.norm(reprojection_residuals(pose, k, points, pixels), axis=1)
    return (cam[:, 2] > 1e-9) & (e <= threshold_px)
