import numpy as np
import pytest

from shape_tracker.errors import BehindCamera, DegenerateParallax, Miss, OutOfBounds
from shape_tracker.geometry import (
    Intrinsics,
    Pose,
    intersect_rays_triangles,
    look_at,
    parallax_angle,
    project_point,
    project_points,
    ray_through_pixel,
    ray_triangle_intersect,
    triangulate,
)

from conftest import random_pose


class TestIntrinsics:
    def test_principal_point_must_be_inside(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=100, fy=100, cx=400, cy=10, width=320, height=240)

    def test_focal_must_be_positive(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=0, fy=100, cx=10, cy=10, width=320, height=240)

    def test_in_bounds_uses_pixel_centres(self, k):
        pixels = np.array([[0, 0], [319, 239], [319.5, 10], [-0.1, 5]])
        np.testing.assert_array_equal(k.in_bounds(pixels), [True, True, False, False])


class TestPose:
    def test_inverse_composes_to_identity(self, rng):
        pose = random_pose(rng)
        ident = pose.compose(pose.inverse())
        np.testing.assert_allclose(ident.matrix34(), np.eye(3, 4), atol=1e-12)

    def test_compose_applies_right_operand_first(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        p = rng.normal(size=(5, 3))
        np.testing.assert_allclose(a.compose(b).transform(p), a.transform(b.transform(p)), atol=1e-12)

    def test_matrix_round_trip(self, rng):
        pose = random_pose(rng)
        again = Pose.from_matrix34(pose.matrix34())
        np.testing.assert_allclose(again.matrix34(), pose.matrix34(), atol=1e-12)

    def test_camera_center_maps_to_origin(self, rng):
        pose = random_pose(rng)
        np.testing.assert_allclose(pose.transform(pose.camera_center()), 0.0, atol=1e-12)

    def test_retract_zero_is_identity(self, rng):
        pose = random_pose(rng)
        np.testing.assert_allclose(pose.retract(np.zeros(6)).matrix34(), pose.matrix34(), atol=1e-15)

    def test_retract_is_left_multiplicative(self, rng):
        pose = random_pose(rng)
        delta = np.array([0.01, -0.02, 0.03, 0.1, 0.2, -0.1])
        expected = Pose.from_rotvec(delta[:3], delta[3:]).compose(pose)
        np.testing.assert_allclose(pose.retract(delta).matrix34(), expected.matrix34(), atol=1e-12)

    def test_quaternion_is_normalized(self):
        pose = Pose(np.array([0.0, 0.0, 0.0, 2.0]), np.zeros(3))
        assert np.linalg.norm(pose.quaternion) == pytest.approx(1.0)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose(np.zeros(4), np.zeros(3))

    def test_look_at_centres_target(self, k):
        pose = look_at(np.array([1.0, 2.0, -3.0]), np.array([0.2, 0.1, 0.0]))
        np.testing.assert_allclose(project_point(pose, k, np.array([0.2, 0.1, 0.0])), [k.cx, k.cy], atol=1e-9)

    def test_angle_to(self):
        a = Pose.identity()
        b = Pose.from_rotvec(np.array([0.0, 0.0, 0.25]), np.zeros(3))
        assert a.angle_to(b) == pytest.approx(0.25)


class TestProjection:
    def test_axis_point_hits_principal_point(self, k, front_pose):
        np.testing.assert_allclose(project_point(front_pose, k, np.zeros(3)), [160.0, 120.0])

    def test_behind_camera_raises(self, k, front_pose):
        with pytest.raises(BehindCamera):
            project_point(front_pose, k, np.array([0.0, 0.0, -5.0]))

    def test_batch_marks_points_behind(self, k, front_pose):
        pixels, in_front = project_points(front_pose, k, np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -4.0]]))
        np.testing.assert_array_equal(in_front, [True, False])
        assert np.isnan(pixels[1]).all()

    def test_ray_round_trip(self, k, rng):
        pose = random_pose(rng)
        for pixel in rng.uniform([0, 0], [319, 239], size=(20, 2)):
            ray = ray_through_pixel(pose, k, pixel)
            np.testing.assert_allclose(project_point(pose, k, ray.at(3.7)), pixel, atol=1e-9)

    def test_ray_out_of_bounds(self, k, front_pose):
        with pytest.raises(OutOfBounds):
            ray_through_pixel(front_pose, k, np.array([320.0, 10.0]))


class TestRayTriangle:
    V0, V1, V2 = np.array([-1.0, -1.0, 0.0]), np.array([1.0, -1.0, 0.0]), np.array([0.0, 1.0, 0.0])

    def test_hit_distance_and_barycentrics(self, k):
        pose = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, 2.0]))
        ray = ray_through_pixel(pose, k, np.array([k.cx, k.cy]))
        t, (u, v) = ray_triangle_intersect(ray, self.V0, self.V1, self.V2)
        assert t == pytest.approx(2.0)
        np.testing.assert_allclose(self.V0 + u * (self.V1 - self.V0) + v * (self.V2 - self.V0), 0.0, atol=1e-12)

    def test_miss(self, k):
        pose = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([5.0, 0.0, 2.0]))
        ray = ray_through_pixel(pose, k, np.array([k.cx, k.cy]))
        with pytest.raises(Miss):
            ray_triangle_intersect(ray, self.V0, self.V1, self.V2)

    def test_hit_behind_origin_is_miss(self, k):
        pose = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, -2.0]))
        ray = ray_through_pixel(pose, k, np.array([k.cx, k.cy]))
        with pytest.raises(Miss):
            ray_triangle_intersect(ray, self.V0, self.V1, self.V2)

    def test_degenerate_triangle(self, k, front_pose):
        ray = ray_through_pixel(front_pose, k, np.array([k.cx, k.cy]))
        with pytest.raises(ValueError):
            ray_triangle_intersect(ray, self.V0, self.V0, self.V2)

    def test_batch_matches_scalar(self, rng):
        origins = rng.normal(size=(50, 3)) + [0, 0, -3]
        directions = rng.normal(size=(50, 3)) * 0.2 + [0, 0, 1]
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        t_batch, _, _ = intersect_rays_triangles(origins, directions, self.V0, self.V1, self.V2)
        for o, d, tb in zip(origins, directions, t_batch):
            t, _, _ = intersect_rays_triangles(o, d, self.V0, self.V1, self.V2)
            assert (np.isnan(t) and np.isnan(tb)) or t == tb


class TestTriangulation:
    def test_recovers_point(self, k):
        a = look_at(np.array([-0.5, 0.0, -4.0]), np.zeros(3))
        b = look_at(np.array([0.5, 0.0, -4.0]), np.zeros(3))
        point = np.array([0.1, -0.2, 0.3])
        estimate, parallax = triangulate(a, b, project_point(a, k, point), project_point(b, k, point), k)
        np.testing.assert_allclose(estimate, point, atol=1e-9)
        assert parallax > 10.0

    def test_parallax_gate(self, k):
        a = look_at(np.array([0.0, 0.0, -4.0]), np.zeros(3))
        b = look_at(np.array([0.001, 0.0, -4.0]), np.zeros(3))
        point = np.array([0.0, 0.0, 0.0])
        with pytest.raises(DegenerateParallax) as err:
            triangulate(a, b, project_point(a, k, point), project_point(b, k, point), k, min_parallax_deg=0.5)
        assert err.value.parallax_deg < 0.5

    def test_parallax_angle_of_identical_rays(self, k, front_pose):
        px = np.array([100.0, 50.0])
        assert parallax_angle(front_pose, front_pose, k, px, px) == pytest.approx(0.0, abs=1e-6)
