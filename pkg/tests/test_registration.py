import numpy as np
import pytest

from shape_tracker.configs.models import RegistrationConfig
from shape_tracker.errors import DegenerateConfiguration, OutOfBounds, TooFewPoints
from shape_tracker.geometry import Pose, look_at, project_points
from shape_tracker.registration import (
    correspondences_from_arrays,
    count_inliers,
    octahedral_rotations,
    solve_initial_registration,
)


def _scene(k, rng, n=20, pose=None):
    pose = pose or look_at(np.array([0.8, -0.5, -3.5]), np.array([0.0, 0.1, 0.0]))
    directions = rng.normal(size=(400, 3))
    points = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    # keep surface points facing the camera
    center = pose.camera_center()
    facing = np.sum(points * (center - points), axis=1) > 0
    points = points[facing][:n]
    pixels, _ = project_points(pose, k, points)
    return pose, points, pixels


class TestOctahedralGrid:
    def test_24_distinct_proper_rotations(self):
        rotations = octahedral_rotations()
        assert len(rotations) == 24
        for r in rotations:
            np.testing.assert_allclose(r @ r.T, np.eye(3))
            assert np.linalg.det(r) == pytest.approx(1.0)
        assert len({r.tobytes() for r in rotations}) == 24


class TestInitialRegistration:
    def test_exact_correspondences(self, k, rng):
        pose, points, pixels = _scene(k, rng)
        result = solve_initial_registration(correspondences_from_arrays(points, pixels), k)
        assert result.rms_px < 1e-6
        assert result.converged
        np.testing.assert_allclose(result.pose.matrix34(), pose.matrix34(), atol=1e-6)

    def test_per_start_residuals(self, k, rng):
        _, points, pixels = _scene(k, rng)
        result = solve_initial_registration(correspondences_from_arrays(points, pixels), k)
        assert len(result.per_start_residuals) == 24 * 3
        best = min(r for _, r in result.per_start_residuals)
        assert result.per_start_residuals[result.winning_seed][1] == best
        assert result.rms_px == best

    def test_robust_to_misclicks(self, k, rng):
        pose, points, pixels = _scene(k, rng)
        pixels = pixels.copy()
        pixels[:2] += [[25.0, -20.0], [-30.0, 15.0]]
        pixels = np.clip(pixels, 0, [k.width - 1, k.height - 1])
        result = solve_initial_registration(correspondences_from_arrays(points, pixels), k)
        assert np.degrees(result.pose.angle_to(pose)) < 1.5
        inliers = count_inliers(result.pose, points, pixels, k, 3.0)
        assert inliers[2:].all()
        assert not inliers[:2].any()

    def test_parallel_starts_match_sequential(self, k, rng):
        _, points, pixels = _scene(k, rng)
        pixels = pixels + rng.normal(scale=0.5, size=pixels.shape)
        corrs = correspondences_from_arrays(points, pixels)
        one = solve_initial_registration(corrs, k, RegistrationConfig(workers=1))
        four = solve_initial_registration(corrs, k, RegistrationConfig(workers=4))
        assert one.per_start_residuals == four.per_start_residuals
        np.testing.assert_array_equal(one.pose.matrix34(), four.pose.matrix34())

    def test_correspondence_order_does_not_matter(self, k, rng):
        _, points, pixels = _scene(k, rng)
        pixels = pixels + rng.normal(scale=0.5, size=pixels.shape)
        order = rng.permutation(len(points))
        forward = solve_initial_registration(correspondences_from_arrays(points, pixels), k)
        shuffled = solve_initial_registration(correspondences_from_arrays(points[order], pixels[order]), k)
        np.testing.assert_allclose(shuffled.pose.matrix34(), forward.pose.matrix34(), atol=1e-6)
        assert shuffled.rms_px == pytest.approx(forward.rms_px, abs=1e-6)

    def test_extra_seed_only(self, k, rng):
        pose, points, pixels = _scene(k, rng)
        near = pose.retract(np.array([0.02, -0.01, 0.01, 0.05, 0.0, -0.05]))
        result = solve_initial_registration(
            correspondences_from_arrays(points, pixels), k,
            RegistrationConfig(use_rotation_grid=False), extra_seeds=[near],
        )
        assert len(result.per_start_residuals) == 1
        assert result.rms_px < 1e-6

    def test_no_seeds(self, k, rng):
        _, points, pixels = _scene(k, rng)
        with pytest.raises(ValueError):
            solve_initial_registration(
                correspondences_from_arrays(points, pixels), k, RegistrationConfig(use_rotation_grid=False)
            )

    def test_too_few_points(self, k, rng):
        _, points, pixels = _scene(k, rng, n=3)
        with pytest.raises(TooFewPoints):
            solve_initial_registration(correspondences_from_arrays(points, pixels), k)

    def test_collinear_points(self, k):
        points = np.array([[t, 0.0, 0.0] for t in np.linspace(-0.5, 0.5, 6)])
        pose = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, 4.0]))
        pixels, _ = project_points(pose, k, points)
        with pytest.raises(DegenerateConfiguration):
            solve_initial_registration(correspondences_from_arrays(points, pixels), k)

    def test_pixels_outside_image(self, k, rng):
        _, points, pixels = _scene(k, rng)
        pixels = pixels.copy()
        pixels[0] = [-10.0, 5.0]
        with pytest.raises(OutOfBounds):
            solve_initial_registration(correspondences_from_arrays(points, pixels), k)


class TestCountInliers:
    def test_points_behind_are_outliers(self, k, front_pose):
        points = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -10.0]])
        pixels = np.array([[160.0, 120.0], [160.0, 120.0]])
        np.testing.assert_array_equal(count_inliers(front_pose, points, pixels, k, 3.0), [True, False])
