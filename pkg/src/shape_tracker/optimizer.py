"""
Robust nonlinear least squares over poses and map points.

Reprojection residuals are pixel differences after perspective division; the optional
shape term pulls every constrained point towards its closest surface sample, with the
anchor refreshed once per Levenberg-Marquardt iteration and held fixed inside the solve.
Pose updates use the left-multiplicative retraction of `Pose.retract`.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .configs.models import OptimizerConfig
from .configs.settings import COVISIBILITY_MIN_SHARED, SHAPE_HUBER_FRACTION
from .errors import Diverged, SingularSystem, TooFewObservations
from .geometry import Intrinsics, Pose
from .prior_shape import SurfaceIndex, closest_points

if TYPE_CHECKING:
    from .slam_map import SlamMap

logger = logging.getLogger(__name__)

MIN_DEPTH_CLAMP = 1e-6
MIN_POSE_OBSERVATIONS = 6
_MAX_LAMBDA = 1e12
_EPSILON = 1e-9


class KernelKind(str, Enum):
    NONE = "none"
    HUBER = "huber"


@dataclass(frozen=True)
class RobustKernel:
    kind: KernelKind = KernelKind.HUBER
    delta: float = 3.0

    def __post_init__(self) -> None:
        if self.kind == KernelKind.HUBER and not self.delta > 0:
            raise ValueError("huber kernel needs delta > 0")

    @classmethod
    def huber(cls, delta: float) -> "RobustKernel":
        return cls(KernelKind.HUBER, float(delta))

    @classmethod
    def none(cls) -> "RobustKernel":
        return cls(KernelKind.NONE, 1.0)

    def cost(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.kind == KernelKind.NONE:
            return r * r
        return np.where(r <= self.delta, r * r, self.delta * (2.0 * r - self.delta))

    def weight(self, r: np.ndarray) -> np.ndarray:
        """IRLS weight: derivative of the cost with respect to r squared."""
        r = np.asarray(r, dtype=float)
        if self.kind == KernelKind.NONE:
            return np.ones_like(r)
        with np.errstate(divide="ignore"):
            return np.where(r <= self.delta, 1.0, self.delta / np.maximum(r, 1e-300))


def robust_cost(residual_norm: float, kernel: RobustKernel) -> float:
    if residual_norm < 0:
        raise ValueError("residual norm must be >= 0")
    return float(kernel.cost(residual_norm))


# =====================
# Residuals and Jacobians
# =====================

def _skew_batch(v: np.ndarray) -> np.ndarray:
    s = np.zeros(v.shape[:-1] + (3, 3))
    s[..., 0, 1], s[..., 0, 2] = -v[..., 2], v[..., 1]
    s[..., 1, 0], s[..., 1, 2] = v[..., 2], -v[..., 0]
    s[..., 2, 0], s[..., 2, 1] = -v[..., 1], v[..., 0]
    return s


def _project_cam(cam: np.ndarray, k: Intrinsics) -> np.ndarray:
    z = np.maximum(cam[:, 2], MIN_DEPTH_CLAMP)
    return np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)


def reprojection_residuals(pose: Pose, k: Intrinsics, points: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Predicted minus measured pixel, (N, 2). Depths are clamped at MIN_DEPTH_CLAMP."""
    return _project_cam(pose.transform(np.atleast_2d(points)), k) - np.atleast_2d(pixels)


def _projection_derivative(cam: np.ndarray, k: Intrinsics) -> np.ndarray:
    z = np.maximum(cam[:, 2], MIN_DEPTH_CLAMP)
    inv_z = 1.0 / z
    a = np.zeros((len(cam), 2, 3))
    a[:, 0, 0] = k.fx * inv_z
    a[:, 0, 2] = -k.fx * cam[:, 0] * inv_z * inv_z
    a[:, 1, 1] = k.fy * inv_z
    a[:, 1, 2] = -k.fy * cam[:, 1] * inv_z * inv_z
    return a


def reprojection_jacobians(pose: Pose, k: Intrinsics, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of the reprojection residual with respect to the pose tangent (omega, v)
    under `Pose.retract`, shape (N, 2, 6), and the world point, shape (N, 2, 3).
    """
    cam = pose.transform(np.atleast_2d(points))
    a = _projection_derivative(cam, k)
    j_pose = np.empty((len(cam), 2, 6))
    j_pose[:, :, :3] = -np.einsum("nij,njk->nik", a, _skew_batch(cam))
    j_pose[:, :, 3:] = a
    j_point = a @ pose.rotation
    return j_pose, j_point


def shape_residuals(points: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    return np.atleast_2d(points) - np.atleast_2d(anchors)


def shape_jacobians(points: np.ndarray) -> np.ndarray:
    """d(f - D(f))/df with the anchor held fixed."""
    return np.broadcast_to(np.eye(3), (len(np.atleast_2d(points)), 3, 3)).copy()


def _damped(h: np.ndarray, lam: float) -> np.ndarray:
    out = h.copy()
    idx = np.arange(h.shape[-1])
    out[..., idx, idx] += lam * h[..., idx, idx] + _EPSILON
    return out


# =====================
# Motion-only pose refinement
# =====================

@dataclass
class PoseFit:
    pose: Pose
    cost: float
    iterations: int
    converged: bool


def refine_pose_lm(
    points: np.ndarray,
    pixels: np.ndarray,
    k: Intrinsics,
    initial: Pose,
    kernel: RobustKernel,
    max_iterations: int = 10,
    rel_tol: float = 1e-10,
    initial_lambda: float = 1e-4,
) -> PoseFit:
    """Levenberg-Marquardt on the robust reprojection cost with fixed 3D points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))

    def total(pose: Pose) -> Tuple[float, np.ndarray]:
        e = reprojection_residuals(pose, k, points, pixels)
        return float(kernel.cost(np.linalg.norm(e, axis=1)).sum()), e

    pose = initial
    cost, e = total(pose)
    lam = initial_lambda
    for iteration in range(1, max_iterations + 1):
        if cost <= 0.0:
            return PoseFit(pose, cost, iteration - 1, True)
        w = kernel.weight(np.linalg.norm(e, axis=1))
        j, _ = reprojection_jacobians(pose, k, points)
        h = np.einsum("n,nji,njk->ik", w, j, j)
        g = np.einsum("n,nji,nj->i", w, j, e)

        accepted = False
        while lam < _MAX_LAMBDA:
            try:
                delta = np.linalg.solve(_damped(h, lam), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = pose.retract(delta)
            new_cost, new_e = total(candidate)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            return PoseFit(pose, cost, iteration, True)

        decrease = (cost - new_cost) / cost
        pose, cost, e = candidate, new_cost, new_e
        lam = max(lam * 0.3, 1e-12)
        if decrease < rel_tol:
            return PoseFit(pose, cost, iteration, True)
    return PoseFit(pose, cost, max_iterations, False)


def optimize_pose(
    map_points: np.ndarray,
    observations: Sequence[Tuple[int, np.ndarray]],
    initial: Pose,
    k: Intrinsics,
    config: Optional[OptimizerConfig] = None,
) -> Tuple[Pose, np.ndarray]:
    """
    Motion-only refinement of a single camera pose against fixed map points.

    `observations` is a list of (point index, pixel). Returns the pose and a boolean
    inlier flag per observation; residuals above twice the kernel delta are outliers.
    Each round optimizes on the current inliers then reflags all observations.
    """
    config = config or OptimizerConfig()
    if len(observations) < MIN_POSE_OBSERVATIONS:
        raise TooFewObservations(f"{len(observations)} observations, need >= {MIN_POSE_OBSERVATIONS}")

    idx = np.array([o[0] for o in observations], dtype=np.int64)
    pixels = np.array([o[1] for o in observations], dtype=float).reshape(-1, 2)
    points = np.asarray(map_points, dtype=float)[idx]
    kernel = RobustKernel.huber(config.reprojection_delta)
    gate = 2.0 * config.reprojection_delta

    pose = initial
    inliers = np.ones(len(idx), dtype=bool)
    for _ in range(config.pose_rounds):
        if inliers.sum() < 3:
            break
        fit = refine_pose_lm(
            points[inliers], pixels[inliers], k, pose, kernel,
            max_iterations=config.pose_iterations,
            rel_tol=config.tolerance,
            initial_lambda=config.initial_lambda,
        )
        pose = fit.pose
        r = np.linalg.norm(reprojection_residuals(pose, k, points, pixels), axis=1)
        inliers = r <= gate

    if not (np.all(np.isfinite(pose.quaternion)) and np.all(np.isfinite(pose.translation))):
        raise Diverged("pose became non-finite", pose=initial)
    if inliers.any():
        sel = inliers
        before = kernel.cost(np.linalg.norm(reprojection_residuals(initial, k, points[sel], pixels[sel]), axis=1)).sum()
        after = kernel.cost(np.linalg.norm(reprojection_residuals(pose, k, points[sel], pixels[sel]), axis=1)).sum()
        if after > before * (1.0 + 1e-9) + 1e-12:
            raise Diverged(f"cost rose from {before:.4g} to {after:.4g}", pose=initial)
    return pose, inliers


# =====================
# Bundle adjustment
# =====================

@dataclass
class BaProblem:
    """
    Poses with per-pose fixed flags, points, reprojection edges (pose, point, pixel)
    and an optional set of shape-constrained point indices against `surface`.
    """

    k: Intrinsics
    poses: List[Pose]
    fixed: np.ndarray
    points: np.ndarray
    edge_pose: np.ndarray
    edge_point: np.ndarray
    edge_pixel: np.ndarray
    shape_points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    surface: Optional[SurfaceIndex] = None

    def __post_init__(self) -> None:
        self.fixed = np.asarray(self.fixed, dtype=bool).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.edge_pose = np.asarray(self.edge_pose, dtype=np.int64).reshape(-1)
        self.edge_point = np.asarray(self.edge_point, dtype=np.int64).reshape(-1)
        self.edge_pixel = np.asarray(self.edge_pixel, dtype=float).reshape(-1, 2)
        self.shape_points = np.unique(np.asarray(self.shape_points, dtype=np.int64).reshape(-1))
        if len(self.fixed) != len(self.poses):
            raise ValueError("one fixed flag per pose required")
        if not self.fixed.any():
            raise ValueError("at least one pose must be fixed (gauge)")
        if not (len(self.edge_pose) == len(self.edge_point) == len(self.edge_pixel)):
            raise ValueError("edge arrays must have equal length")
        if len(self.edge_pose) and (self.edge_pose.min() < 0 or self.edge_pose.max() >= len(self.poses)):
            raise ValueError("edge references a missing pose")
        if len(self.edge_point) and (self.edge_point.min() < 0 or self.edge_point.max() >= len(self.points)):
            raise ValueError("edge references a missing point")
        if len(self.shape_points):
            if self.surface is None:
                raise ValueError("shape edges need a surface index")
            if self.shape_points.min() < 0 or self.shape_points.max() >= len(self.points):
                raise ValueError("shape edge references a missing point")

    @property
    def n_poses(self) -> int:
        return len(self.poses)

    @property
    def n_points(self) -> int:
        return len(self.points)

    def to_text(self) -> str:
        """One line per vertex or edge."""
        k = self.k
        lines = [f"K {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}"]
        for i, (pose, fixed) in enumerate(zip(self.poses, self.fixed)):
            q, t = pose.quaternion, pose.translation
            lines.append(f"POSE {i} {int(fixed)} " + " ".join(repr(float(x)) for x in (*q, *t)))
        for j, p in enumerate(self.points):
            lines.append(f"POINT {j} " + " ".join(repr(float(x)) for x in p))
        for i, j, px in zip(self.edge_pose, self.edge_point, self.edge_pixel):
            lines.append(f"EDGE {i} {j} {float(px[0])!r} {float(px[1])!r}")
        for j in self.shape_points:
            lines.append(f"SHAPE {j}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, surface: Optional[SurfaceIndex] = None) -> "BaProblem":
        k = None
        poses: Dict[int, Tuple[Pose, bool]] = {}
        points: Dict[int, np.ndarray] = {}
        edges, shape = [], []
        for line_number, line in enumerate(text.splitlines(), start=1):
            parts = line.split()
            if not parts:
                continue
            tag, args = parts[0], parts[1:]
            try:
                if tag == "K":
                    fx, fy, cx, cy = map(float, args[:4])
                    k = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(args[4]), height=int(args[5]))
                elif tag == "POSE":
                    vals = [float(a) for a in args[2:9]]
                    poses[int(args[0])] = (Pose(np.array(vals[:4]), np.array(vals[4:])), bool(int(args[1])))
                elif tag == "POINT":
                    points[int(args[0])] = np.array([float(a) for a in args[1:4]])
                elif tag == "EDGE":
                    edges.append((int(args[0]), int(args[1]), float(args[2]), float(args[3])))
                elif tag == "SHAPE":
                    shape.append(int(args[0]))
                else:
                    raise ValueError(f"unknown record '{tag}'")
            except (IndexError, ValueError) as e:
                raise ValueError(f"line {line_number}: {e}")
        if k is None:
            raise ValueError("missing K record")
        edge_arr = np.array(edges, dtype=float).reshape(-1, 4)
        return cls(
            k=k,
            poses=[poses[i][0] for i in sorted(poses)],
            fixed=np.array([poses[i][1] for i in sorted(poses)]),
            points=np.array([points[j] for j in sorted(points)]).reshape(-1, 3),
            edge_pose=edge_arr[:, 0].astype(np.int64),
            edge_point=edge_arr[:, 1].astype(np.int64),
            edge_pixel=edge_arr[:, 2:],
            shape_points=np.array(shape, dtype=np.int64),
            surface=surface,
        )


@dataclass
class BaResult:
    poses: List[Pose]
    points: np.ndarray
    initial_cost: float
    final_cost: float
    iterations: int
    cost_history: List[float]


def _shape_delta(problem: BaProblem, config: OptimizerConfig) -> float:
    if config.shape_delta is not None:
        return config.shape_delta
    return SHAPE_HUBER_FRACTION * problem.surface.bbox_diagonal


class _BundleAdjuster:
    """One LM run over a BaProblem; pose blocks are solved through the point Schur complement."""

    def __init__(self, problem: BaProblem, config: OptimizerConfig):
        self.problem = problem
        self.config = config
        self.k = problem.k
        self.kernel = RobustKernel.huber(config.reprojection_delta)
        self.use_shape = len(problem.shape_points) > 0 and config.w_shape > 0
        self.shape_kernel = RobustKernel.huber(_shape_delta(problem, config)) if self.use_shape else None

        self.free = np.nonzero(~problem.fixed)[0]
        self.free_slot = np.full(problem.n_poses, -1, dtype=np.int64)
        self.free_slot[self.free] = np.arange(len(self.free))

        # edge pairs sharing a point, both with free poses: the off-diagonal Schur blocks
        free_edges = np.nonzero(self.free_slot[problem.edge_pose] >= 0)[0]
        order = free_edges[np.argsort(problem.edge_point[free_edges], kind="stable")]
        pts = problem.edge_point[order]
        counts = np.bincount(pts, minlength=problem.n_points)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rep = counts[pts]
        first = np.repeat(np.arange(len(order)), rep)
        within = np.arange(rep.sum()) - np.repeat(np.cumsum(rep) - rep, rep)
        second = starts[pts][first] + within
        self.free_edges = free_edges
        self.pair_a = order[first]
        self.pair_b = order[second]

    def _edge_terms(self, poses: List[Pose], points: np.ndarray):
        p = self.problem
        e = np.empty((len(p.edge_pose), 2))
        j_pose = np.empty((len(p.edge_pose), 2, 6))
        j_point = np.empty((len(p.edge_pose), 2, 3))
        for i in np.unique(p.edge_pose):
            sel = p.edge_pose == i
            pts = points[p.edge_point[sel]]
            e[sel] = reprojection_residuals(poses[i], self.k, pts, p.edge_pixel[sel])
            j_pose[sel], j_point[sel] = reprojection_jacobians(poses[i], self.k, pts)
        return e, j_pose, j_point

    def _residuals(self, poses: List[Pose], points: np.ndarray) -> np.ndarray:
        p = self.problem
        e = np.empty((len(p.edge_pose), 2))
        for i in np.unique(p.edge_pose):
            sel = p.edge_pose == i
            e[sel] = reprojection_residuals(poses[i], self.k, points[p.edge_point[sel]], p.edge_pixel[sel])
        return e

    def anchors(self, points: np.ndarray) -> Optional[np.ndarray]:
        if not self.use_shape:
            return None
        anchors, _, _ = closest_points(self.problem.surface, points[self.problem.shape_points])
        return anchors

    def cost(self, poses: List[Pose], points: np.ndarray, anchors: Optional[np.ndarray]) -> float:
        total = float(self.kernel.cost(np.linalg.norm(self._residuals(poses, points), axis=1)).sum())
        if anchors is not None:
            d = np.linalg.norm(points[self.problem.shape_points] - anchors, axis=1)
            total += self.config.w_shape * float(self.shape_kernel.cost(d).sum())
        return total

    def _normal_equations(self, poses, points, anchors):
        p = self.problem
        n_free = len(self.free)
        e, j_pose, j_point = self._edge_terms(poses, points)
        w = self.kernel.weight(np.linalg.norm(e, axis=1))

        v = np.zeros((p.n_points, 3, 3))
        g_point = np.zeros((p.n_points, 3))
        np.add.at(v, p.edge_point, np.einsum("n,nji,njk->nik", w, j_point, j_point))
        np.add.at(g_point, p.edge_point, np.einsum("n,nji,nj->ni", w, j_point, e))
        if anchors is not None:
            r = shape_residuals(points[p.shape_points], anchors)
            ws = self.config.w_shape * self.shape_kernel.weight(np.linalg.norm(r, axis=1))
            v[p.shape_points] += ws[:, None, None] * np.eye(3)
            g_point[p.shape_points] += ws[:, None] * r

        u = np.zeros((n_free, 6, 6))
        g_pose = np.zeros((n_free, 6))
        fe = self.free_edges
        slots = self.free_slot[p.edge_pose[fe]]
        np.add.at(u, slots, np.einsum("n,nji,njk->nik", w[fe], j_pose[fe], j_pose[fe]))
        np.add.at(g_pose, slots, np.einsum("n,nji,nj->ni", w[fe], j_pose[fe], e[fe]))
        w_blocks = np.zeros((len(p.edge_pose), 6, 3))
        w_blocks[fe] = np.einsum("n,nji,njk->nik", w[fe], j_pose[fe], j_point[fe])
        return u, g_pose, v, g_point, w_blocks

    def _solve(self, u, g_pose, v, g_point, w_blocks, lam):
        p = self.problem
        n_free = len(self.free)
        v_inv = np.linalg.inv(_damped(v, lam))
        if n_free == 0:
            return np.zeros((0, 6)), -np.einsum("nij,nj->ni", v_inv, g_point)

        fe = self.free_edges
        a, b = self.pair_a, self.pair_b
        blocks = np.einsum("nij,njk,nlk->nil", w_blocks[a], v_inv[p.edge_point[a]], w_blocks[b])
        s = np.zeros((n_free, n_free, 6, 6))
        np.add.at(s, (self.free_slot[p.edge_pose[a]], self.free_slot[p.edge_pose[b]]), -blocks)
        idx = np.arange(n_free)
        s[idx, idx] += _damped(u, lam)
        s = s.transpose(0, 2, 1, 3).reshape(6 * n_free, 6 * n_free)

        rhs = -g_pose.copy()
        np.add.at(rhs, self.free_slot[p.edge_pose[fe]],
                  np.einsum("nij,njk,nk->ni", w_blocks[fe], v_inv[p.edge_point[fe]], g_point[p.edge_point[fe]]))
        d_pose = np.linalg.solve(s, rhs.reshape(-1)).reshape(n_free, 6)

        back = np.zeros((p.n_points, 3))
        np.add.at(back, p.edge_point[fe],
                  np.einsum("nji,nj->ni", w_blocks[fe], d_pose[self.free_slot[p.edge_pose[fe]]]))
        d_point = np.einsum("nij,nj->ni", v_inv, -g_point - back)
        return d_pose, d_point

    def _apply(self, poses, points, d_pose, d_point):
        new_poses = list(poses)
        for slot, i in enumerate(self.free):
            new_poses[i] = poses[i].retract(d_pose[slot])
        return new_poses, points + d_point

    def run(self) -> BaResult:
        p = self.problem
        poses, points = list(p.poses), p.points.copy()
        anchors = self.anchors(points)
        cost = self.cost(poses, points, anchors)
        initial_cost = cost
        history = [cost]
        lam = self.config.initial_lambda
        iterations = 0

        for iterations in range(1, self.config.max_iterations + 1):
            if cost <= 0.0:
                break
            u, g_pose, v, g_point, w_blocks = self._normal_equations(poses, points, anchors)
            accepted = False
            singular = 0
            while lam < _MAX_LAMBDA:
                try:
                    d_pose, d_point = self._solve(u, g_pose, v, g_point, w_blocks, lam)
                except np.linalg.LinAlgError:
                    singular += 1
                    lam *= 10.0
                    continue
                cand_poses, cand_points = self._apply(poses, points, d_pose, d_point)
                new_cost = self.cost(cand_poses, cand_points, anchors)
                if np.isfinite(new_cost) and new_cost < cost:
                    accepted = True
                    break
                lam *= 2.0
            if not accepted:
                if singular and lam >= _MAX_LAMBDA:
                    raise SingularSystem(f"normal equations singular after {singular} damping increases")
                break

            decrease = (cost - new_cost) / cost
            poses, points = cand_poses, cand_points
            lam = max(lam / 2.0, 1e-12)
            # anchors follow the accepted iterate; the refreshed cost can only be lower
            anchors = self.anchors(points)
            cost = self.cost(poses, points, anchors)
            if cost > history[-1]:
                raise AssertionError("bundle adjustment increased the robust cost")
            history.append(cost)
            if decrease < self.config.tolerance:
                break

        logger.debug(
            f"[BundleAdjust] {len(self.free)} free poses, {p.n_points} points, "
            f"cost {initial_cost:.6g} -> {cost:.6g} in {iterations} iterations"
        )
        return BaResult(poses, points, initial_cost, cost, iterations, history)


def bundle_adjust(problem: BaProblem, config: Optional[OptimizerConfig] = None) -> BaResult:
    """
    Levenberg-Marquardt over all free poses and all points.

    Minimizes the robust reprojection cost plus w_shape times the robust
    point-to-surface cost over `problem.shape_points`. Fixed poses are returned as the
    very same objects.
    """
    config = config or OptimizerConfig()
    counts = np.bincount(problem.edge_point, minlength=problem.n_points)
    constrained = np.zeros(problem.n_points, dtype=bool)
    if config.w_shape > 0:
        constrained[problem.shape_points] = True
    weak = np.nonzero((counts < 2) & ~constrained)[0]
    if len(weak):
        raise ValueError(f"{len(weak)} points observed fewer than twice and not shape-constrained")
    return _BundleAdjuster(problem, config).run()


# =====================
# Map-level problems
# =====================

def problem_from_map(
    slam_map: "SlamMap",
    keyframe_ids: Sequence[int],
    surface: Optional[SurfaceIndex] = None,
    with_shape: bool = True,
) -> Tuple[BaProblem, List[int], List[int]]:
    """
    Build a BaProblem over the points seen by `keyframe_ids`. Keyframes outside the set
    that observe those points are added as fixed; the first map keyframe is always fixed.

    Returns (problem, keyframe id per pose index, point id per point index). Points that
    would be under-constrained are left out.
    """
    window = [kf for kf in keyframe_ids if kf in slam_map.keyframes]
    point_ids = sorted({pid for kf in window for pid in slam_map.keyframes[kf].observed_point_ids()})

    observers: Dict[int, List[Tuple[int, int]]] = {
        pid: sorted(slam_map.points[pid].observations.items()) for pid in point_ids
    }
    shape_on = with_shape and surface is not None
    point_ids = [pid for pid in point_ids if len(observers[pid]) >= 2 or shape_on]

    pose_ids = list(window)
    for pid in point_ids:
        for kf_id, _ in observers[pid]:
            if kf_id not in pose_ids:
                pose_ids.append(kf_id)
    pose_ids.sort()
    first = slam_map.first_keyframe_id
    in_window = set(window)
    fixed = np.array([(kf not in in_window) or kf == first for kf in pose_ids])
    if not fixed.any():
        fixed[0] = True
    slot = {kf: i for i, kf in enumerate(pose_ids)}

    edge_pose, edge_point, edge_pixel = [], [], []
    for j, pid in enumerate(point_ids):
        for kf_id, obs_index in observers[pid]:
            edge_pose.append(slot[kf_id])
            edge_point.append(j)
            edge_pixel.append(slam_map.keyframes[kf_id].pixels[obs_index])

    problem = BaProblem(
        k=slam_map.k,
        poses=[slam_map.keyframes[kf].pose for kf in pose_ids],
        fixed=fixed,
        points=np.array([slam_map.points[pid].position for pid in point_ids]).reshape(-1, 3),
        edge_pose=np.array(edge_pose, dtype=np.int64),
        edge_point=np.array(edge_point, dtype=np.int64),
        edge_pixel=np.array(edge_pixel, dtype=float).reshape(-1, 2),
        shape_points=np.arange(len(point_ids)) if shape_on else np.zeros(0, dtype=np.int64),
        surface=surface if shape_on else None,
    )
    return problem, pose_ids, point_ids


def write_back(slam_map: "SlamMap", result: BaResult, problem: BaProblem, pose_ids: List[int], point_ids: List[int]) -> None:
    with slam_map.lock.write():
        for i, kf_id in enumerate(pose_ids):
            if not problem.fixed[i] and kf_id in slam_map.keyframes:
                slam_map.keyframes[kf_id].pose = result.poses[i]
        for j, pid in enumerate(point_ids):
            if pid in slam_map.points:
                slam_map.points[pid].position = result.points[j].copy()


def local_window(slam_map: "SlamMap", center_kf_id: int, window_size: int, min_shared: int = COVISIBILITY_MIN_SHARED) -> List[int]:
    """Center keyframe plus its strongest covisible neighbors (>= min_shared points)."""
    neighbors = slam_map.covisible_keyframes(center_kf_id, min_shared)
    return [center_kf_id] + [kf for kf, _ in neighbors[: max(0, window_size - 1)]]


def local_bundle_adjust(
    slam_map: "SlamMap",
    center_kf_id: int,
    window_size: int,
    config: Optional[OptimizerConfig] = None,
    surface: Optional[SurfaceIndex] = None,
    min_shared: int = COVISIBILITY_MIN_SHARED,
) -> Optional[BaResult]:
    """
    Bundle adjustment over the covisibility window of `center_kf_id`; keyframes outside
    the window that observe window points take part as fixed poses. When every pose
    ends up fixed (a window of one on the first keyframe) only the points are refined.
    """
    config = config or OptimizerConfig()
    if center_kf_id not in slam_map.keyframes:
        raise KeyError(f"keyframe {center_kf_id} not in map")
    with slam_map.lock.read():
        window = local_window(slam_map, center_kf_id, window_size, min_shared)
        problem, pose_ids, point_ids = problem_from_map(slam_map, window, surface, with_shape=config.w_shape > 0)
    if problem.n_points == 0:
        return None
    result = bundle_adjust(problem, config)
    write_back(slam_map, result, problem, pose_ids, point_ids)
    logger.info(
        f"[LocalBA] keyframe {center_kf_id}: window {window}, {problem.n_points} points, "
        f"cost {result.initial_cost:.4g} -> {result.final_cost:.4g}"
    )
    return result
