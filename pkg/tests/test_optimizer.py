import numpy as np
import pytest

from shape_tracker.configs.models import OptimizerConfig
from shape_tracker.errors import TooFewObservations
from shape_tracker.geometry import look_at, project_points
from shape_tracker.optimizer import (
    BaProblem,
    RobustKernel,
    bundle_adjust,
    optimize_pose,
    reprojection_jacobians,
    reprojection_residuals,
    robust_cost,
    shape_jacobians,
    shape_residuals,
)
from shape_tracker.prior_shape import build_surface_index, make_icosphere

from conftest import random_pose


def _two_view_problem(k, rng, n_points=50, noise=0.3, perturb=0.02):
    pose_a = look_at(np.array([-0.3, 0.0, -4.0]), np.zeros(3))
    pose_b = look_at(np.array([0.3, 0.1, -4.0]), np.zeros(3))
    points = rng.uniform(-0.7, 0.7, size=(n_points, 3))
    pixels_a, _ = project_points(pose_a, k, points)
    pixels_b, _ = project_points(pose_b, k, points)
    pixels = np.vstack([pixels_a, pixels_b]) + rng.normal(scale=noise, size=(2 * n_points, 2))
    init_b = pose_b.retract(rng.normal(scale=0.005, size=6))
    problem = BaProblem(
        k=k,
        poses=[pose_a, init_b],
        fixed=np.array([True, False]),
        points=points + rng.normal(scale=perturb, size=points.shape),
        edge_pose=np.repeat([0, 1], n_points),
        edge_point=np.tile(np.arange(n_points), 2),
        edge_pixel=pixels,
    )
    return problem


def _dense_reference_cost(problem, iterations=20, step=1e-6):
    """Dense Gauss-Newton with central-difference Jacobians over every free parameter."""
    free = np.nonzero(~problem.fixed)[0]
    n_pose = 6 * len(free)

    def unpack(x):
        poses = list(problem.poses)
        for slot, i in enumerate(free):
            poses[i] = problem.poses[i].retract(x[6 * slot:6 * slot + 6])
        return poses, problem.points + x[n_pose:].reshape(-1, 3)

    def residual(x):
        poses, points = unpack(x)
        out = np.empty((len(problem.edge_pose), 2))
        for i, pose in enumerate(poses):
            sel = problem.edge_pose == i
            cam = pose.transform(points[problem.edge_point[sel]])
            out[sel, 0] = problem.k.fx * cam[:, 0] / cam[:, 2] + problem.k.cx - problem.edge_pixel[sel, 0]
            out[sel, 1] = problem.k.fy * cam[:, 1] / cam[:, 2] + problem.k.cy - problem.edge_pixel[sel, 1]
        return out.ravel()

    x = np.zeros(n_pose + 3 * problem.n_points)
    for _ in range(iterations):
        r = residual(x)
        jac = np.empty((len(r), len(x)))
        for c in range(len(x)):
            e = np.zeros_like(x)
            e[c] = step
            jac[:, c] = (residual(x + e) - residual(x - e)) / (2 * step)
        dx, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        x = x + dx
    r = residual(x)
    return float(np.sum(r * r)), np.abs(r).max()


class TestRobustKernel:
    def test_quadratic_inside_linear_outside(self):
        kernel = RobustKernel.huber(3.0)
        assert robust_cost(2.0, kernel) == pytest.approx(4.0)
        assert robust_cost(5.0, kernel) == pytest.approx(3.0 * (10.0 - 3.0))

    def test_continuous_at_delta(self):
        kernel = RobustKernel.huber(3.0)
        assert robust_cost(3.0 - 1e-9, kernel) == pytest.approx(robust_cost(3.0 + 1e-9, kernel), abs=1e-7)

    def test_negative_residual_norm(self):
        with pytest.raises(ValueError):
            robust_cost(-1.0, RobustKernel.huber(1.0))

    def test_weights(self):
        kernel = RobustKernel.huber(2.0)
        np.testing.assert_allclose(kernel.weight(np.array([1.0, 4.0])), [1.0, 0.5])

    def test_invalid_delta(self):
        with pytest.raises(ValueError):
            RobustKernel.huber(0.0)


class TestJacobians:
    def test_reprojection_gradients(self, k, rng):
        h = 1e-6
        for _ in range(100):
            pose = random_pose(rng)
            point = rng.uniform(-0.8, 0.8, size=(1, 3))
            pixel = np.zeros((1, 2))
            j_pose, j_point = reprojection_jacobians(pose, k, point)
            num_pose = np.empty((2, 6))
            for c in range(6):
                d = np.zeros(6)
                d[c] = h
                num_pose[:, c] = (
                    reprojection_residuals(pose.retract(d), k, point, pixel)
                    - reprojection_residuals(pose.retract(-d), k, point, pixel)
                )[0] / (2 * h)
            num_point = np.empty((2, 3))
            for c in range(3):
                d = np.zeros(3)
                d[c] = h
                num_point[:, c] = (
                    reprojection_residuals(pose, k, point + d, pixel) - reprojection_residuals(pose, k, point - d, pixel)
                )[0] / (2 * h)
            assert np.linalg.norm(j_pose[0] - num_pose) <= 1e-4 * np.linalg.norm(num_pose)
            assert np.linalg.norm(j_point[0] - num_point) <= 1e-4 * np.linalg.norm(num_point)

    def test_shape_gradients(self, rng):
        h = 1e-6
        for _ in range(100):
            point = rng.normal(size=(1, 3))
            anchor = rng.normal(size=(1, 3))
            numeric = np.stack([
                (shape_residuals(point + h * e, anchor) - shape_residuals(point - h * e, anchor))[0] / (2 * h)
                for e in np.eye(3)
            ], axis=1)
            np.testing.assert_allclose(shape_jacobians(point)[0], numeric, rtol=1e-4, atol=1e-8)


class TestOptimizePose:
    def _observations(self, k, rng, pose, n=40):
        points = rng.uniform(-0.8, 0.8, size=(n, 3))
        pixels, _ = project_points(pose, k, points)
        return points, [(i, pixels[i]) for i in range(n)]

    def test_recovers_pose(self, k, rng):
        truth = random_pose(rng)
        points, obs = self._observations(k, rng, truth)
        start = truth.retract(np.array([0.02, -0.03, 0.01, 0.05, -0.04, 0.1]))
        pose, inliers = optimize_pose(points, obs, start, k)
        assert inliers.all()
        np.testing.assert_allclose(pose.matrix34(), truth.matrix34(), atol=1e-6)

    def test_flags_outliers(self, k, rng):
        truth = random_pose(rng)
        points, obs = self._observations(k, rng, truth)
        obs[3] = (3, obs[3][1] + [40.0, 0.0])
        obs[7] = (7, obs[7][1] + [0.0, -35.0])
        pose, inliers = optimize_pose(points, obs, truth.retract(np.full(6, 0.01)), k)
        assert not inliers[3] and not inliers[7]
        assert inliers.sum() == len(obs) - 2
        assert np.degrees(pose.angle_to(truth)) < 0.05

    def test_too_few_observations(self, k, rng):
        truth = random_pose(rng)
        points, obs = self._observations(k, rng, truth, n=5)
        with pytest.raises(TooFewObservations):
            optimize_pose(points, obs, truth, k)

    def test_exact_start_is_kept(self, k, rng):
        truth = random_pose(rng)
        points, obs = self._observations(k, rng, truth)
        pose, _ = optimize_pose(points, obs, truth, k)
        np.testing.assert_allclose(pose.matrix34(), truth.matrix34(), atol=1e-9)


class TestBundleAdjust:
    def test_matches_dense_reference(self, k, rng):
        config = OptimizerConfig(max_iterations=100, tolerance=1e-15)
        for _ in range(5):
            problem = _two_view_problem(k, rng)
            result = bundle_adjust(problem, config)
            reference, max_residual = _dense_reference_cost(problem)
            assert max_residual < 3.0
            assert result.final_cost == pytest.approx(reference, rel=1e-8)

    def test_cost_never_increases(self, k, rng):
        problem = _two_view_problem(k, rng, perturb=0.05)
        result = bundle_adjust(problem)
        assert all(b <= a for a, b in zip(result.cost_history, result.cost_history[1:]))
        assert result.final_cost < result.initial_cost

    def test_fixed_pose_untouched(self, k, rng):
        problem = _two_view_problem(k, rng)
        result = bundle_adjust(problem)
        assert result.poses[0] is problem.poses[0]

    def test_requires_gauge(self, k, rng):
        problem = _two_view_problem(k, rng)
        with pytest.raises(ValueError):
            BaProblem(problem.k, problem.poses, np.array([False, False]), problem.points,
                      problem.edge_pose, problem.edge_point, problem.edge_pixel)

    def test_weak_point_rejected(self, k, rng):
        problem = _two_view_problem(k, rng)
        keep = ~((problem.edge_pose == 1) & (problem.edge_point == 0))
        weak = BaProblem(problem.k, problem.poses, problem.fixed, problem.points,
                         problem.edge_pose[keep], problem.edge_point[keep], problem.edge_pixel[keep])
        with pytest.raises(ValueError):
            bundle_adjust(weak)

    def test_shape_term_pulls_points_to_surface(self, k, rng):
        mesh = make_icosphere(3, radius=0.7)
        surface = build_surface_index(mesh, density=2000.0)
        problem = _two_view_problem(k, rng)
        # single-view points anchored only by the surface
        directions = rng.normal(size=(10, 3))
        on_surface = 0.7 * directions / np.linalg.norm(directions, axis=1, keepdims=True)
        pixels, _ = project_points(problem.poses[0], k, on_surface)
        n = problem.n_points
        shaped = BaProblem(
            problem.k, problem.poses, problem.fixed,
            np.vstack([problem.points, on_surface * 1.1]),
            np.concatenate([problem.edge_pose, np.zeros(10, dtype=np.int64)]),
            np.concatenate([problem.edge_point, n + np.arange(10)]),
            np.vstack([problem.edge_pixel, pixels]),
            shape_points=n + np.arange(10),
            surface=surface,
        )
        result = bundle_adjust(shaped, OptimizerConfig(w_shape=100.0))
        radii = np.linalg.norm(result.points[n:], axis=1)
        np.testing.assert_allclose(radii, 0.7, atol=0.02)

    def test_text_round_trip(self, k, rng):
        problem = _two_view_problem(k, rng, n_points=8)
        again = BaProblem.from_text(problem.to_text())
        assert again.to_text() == problem.to_text()
        np.testing.assert_array_equal(again.edge_pixel, problem.edge_pixel)
        np.testing.assert_array_equal(again.fixed, problem.fixed)

    def test_text_rejects_unknown_record(self):
        with pytest.raises(ValueError):
            BaProblem.from_text("K 1 1 0 0 2 2\nBOGUS 1\n")
