import numpy as np
import pytest

from shape_tracker.errors import EmptyMesh, MeshParseError, OutOfBounds
from shape_tracker.geometry import intersect_rays_triangles, rays_through_pixels
from shape_tracker.prior_shape import (
    BinaryMask,
    TriangleMesh,
    build_surface_index,
    closest_point,
    closest_points,
    load_mesh,
    make_bumpy_ellipsoid,
    make_ellipsoid,
    make_icosphere,
    render_depth,
    render_mask,
    save_ply,
    scaled_dilation,
    texture_update,
)

QUAD_OBJ = """# unit quad
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
f 1 2 3 4
"""


class TestMeshIO:
    def test_obj_polygon_is_fanned(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text(QUAD_OBJ)
        mesh = load_mesh(path)
        assert len(mesh.faces) == 2
        assert mesh.total_area == pytest.approx(1.0)
        np.testing.assert_allclose(mesh.face_normals, [[0, 0, 1], [0, 0, 1]])

    def test_degenerate_face_dropped(self, tmp_path):
        path = tmp_path / "degenerate.obj"
        path.write_text(QUAD_OBJ + "f 1 2 1\n")
        mesh = load_mesh(path)
        assert mesh.dropped_faces == 1
        assert len(mesh.faces) == 2

    def test_bad_vertex_reports_line(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 x 0\nv 0 1 0\nf 1 2 3\n")
        with pytest.raises(MeshParseError) as err:
            load_mesh(path)
        assert err.value.line_number == 2

    def test_no_faces(self, tmp_path):
        path = tmp_path / "points.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n")
        with pytest.raises(EmptyMesh):
            load_mesh(path)

    def test_unsupported_extension(self, tmp_path):
        path = tmp_path / "mesh.stl"
        path.write_text("solid x")
        with pytest.raises(MeshParseError):
            load_mesh(path)

    def test_ply_round_trip_keeps_colors(self, tmp_path, sphere):
        sphere.face_colors[:] = [10.0, 20.0, 30.0]
        sphere.face_colors[0] = [255.0, 0.0, 7.0]
        path = save_ply(sphere, tmp_path / "sphere.ply")
        again = load_mesh(path)
        assert len(again.faces) == len(sphere.faces)
        np.testing.assert_allclose(again.vertices, sphere.vertices, atol=1e-8)
        np.testing.assert_allclose(again.face_colors, sphere.face_colors)

    def test_binary_ply_rejected(self, tmp_path):
        path = tmp_path / "bin.ply"
        path.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(MeshParseError):
            load_mesh(path)

    def test_face_index_out_of_range(self):
        with pytest.raises(MeshParseError):
            TriangleMesh.from_arrays(np.zeros((3, 3)), np.array([[0, 1, 3]]))


class TestBuiltinShapes:
    @pytest.mark.parametrize("subdivisions", [0, 1, 3])
    def test_icosphere_face_count(self, subdivisions):
        assert len(make_icosphere(subdivisions).faces) == 20 * 4 ** subdivisions

    def test_icosphere_normals_point_outward(self, sphere):
        centers = sphere.face_vertices.mean(axis=1)
        assert np.all(np.sum(centers * sphere.face_normals, axis=1) > 0)

    def test_ellipsoid_extent(self):
        mesh = make_ellipsoid((1.0, 0.8, 0.6), subdivisions=3)
        np.testing.assert_allclose(np.abs(mesh.vertices).max(axis=0), [1.0, 0.8, 0.6], atol=1e-9)

    def test_bumpy_ellipsoid_is_seeded(self):
        a = make_bumpy_ellipsoid(seed=3, subdivisions=2)
        b = make_bumpy_ellipsoid(seed=3, subdivisions=2)
        c = make_bumpy_ellipsoid(seed=4, subdivisions=2)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        assert not np.allclose(a.vertices, c.vertices)


class TestClosestPoint:
    def test_matches_linear_scan(self, sphere, rng):
        index = build_surface_index(sphere, density=400.0, seed=1)
        queries = rng.normal(size=(500, 3)) * 1.5
        points, dists, ids = closest_points(index, queries)
        for q, p, d, i in zip(queries, points, dists, ids):
            scan = np.linalg.norm(index.samples - q, axis=1)
            assert i == int(np.argmin(scan))
            assert d == pytest.approx(scan.min(), rel=1e-12)
            np.testing.assert_array_equal(p, index.samples[i])

    @pytest.mark.slow
    def test_matches_linear_scan_at_scale(self, rng):
        mesh = make_icosphere(4)
        index = build_surface_index(mesh, density=50_000 / mesh.total_area, seed=2)
        queries = rng.normal(size=(10_000, 3))
        _, dists, ids = closest_points(index, queries)
        for start in range(0, len(queries), 50):
            block = queries[start:start + 50]
            scan = np.linalg.norm(index.samples[None, :, :] - block[:, None, :], axis=2)
            np.testing.assert_array_equal(ids[start:start + 50], np.argmin(scan, axis=1))

    def test_sample_on_surface_has_zero_distance(self, sphere):
        index = build_surface_index(sphere, density=200.0)
        _, dist = closest_point(index, index.samples[7])
        assert dist == 0.0

    def test_default_density_spacing(self, sphere):
        index = build_surface_index(sphere)
        assert index.mean_spacing <= 0.005 * sphere.bbox_diagonal * 1.0001

    def test_samples_lie_on_faces(self, sphere):
        index = build_surface_index(sphere, density=100.0, seed=5)
        tri = sphere.face_vertices[index.sample_faces]
        normals = sphere.face_normals[index.sample_faces]
        offsets = np.sum((index.samples - tri[:, 0]) * normals, axis=1)
        np.testing.assert_allclose(offsets, 0.0, atol=1e-12)


class TestRendering:
    def test_mask_covers_projected_disc(self, sphere, k, front_pose):
        mask = render_mask(sphere, front_pose, k)
        radius = 300.0 / np.sqrt(15.0)
        assert mask.bits[120, 160]
        assert not mask.bits[0, 0]
        assert mask.area == pytest.approx(np.pi * radius ** 2, rel=0.05)

    def test_mask_matches_per_pixel_ray_test(self, sphere, k, front_pose):
        mask = render_mask(sphere, front_pose, k)
        rows, cols = np.mgrid[0:240:7, 0:320:7]
        pixels = np.column_stack([cols.ravel(), rows.ravel()]).astype(float)
        r = np.hypot(pixels[:, 0] - 160, pixels[:, 1] - 120)
        pixels = pixels[np.abs(r - 300.0 / np.sqrt(15.0)) > 3.0]
        hit = ~np.isnan(render_depth(sphere, front_pose, k, pixels))
        np.testing.assert_array_equal(mask.contains(pixels), hit)

    def test_dilation_grows_mask(self, sphere, k, front_pose):
        plain = render_mask(sphere, front_pose, k)
        grown = render_mask(sphere, front_pose, k, dilation_px=4)
        assert grown.area > plain.area
        assert np.all(grown.bits[plain.bits])

    def test_scaled_dilation(self, k_hd):
        assert scaled_dilation(k_hd) == 5

    def test_mask_behind_camera_is_empty(self, sphere, k):
        from shape_tracker.geometry import Pose

        away = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, -4.0]))
        assert render_mask(sphere, away, k).area == 0

    def test_mask_outside_image_is_unset(self, k):
        mask = BinaryMask.full(k)
        np.testing.assert_array_equal(mask.contains(np.array([[-5.0, 3.0], [10.0, 10.0]])), [False, True])

    def test_depth_at_centre(self, sphere, k, front_pose):
        depth = render_depth(sphere, front_pose, k, np.array([[160.0, 120.0], [2.0, 2.0]]))
        assert depth[0] == pytest.approx(3.0, abs=0.02)
        assert np.isnan(depth[1])

    def test_depth_matches_brute_force(self, sphere, k, front_pose, rng):
        pixels = rng.uniform([80, 40], [240, 200], size=(40, 2))
        depth = render_depth(sphere, front_pose, k, pixels)
        origin, dirs = rays_through_pixels(front_pose, k, pixels)
        tri = sphere.face_vertices
        t, _, _ = intersect_rays_triangles(
            origin[None, None, :], dirs[:, None, :], tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
        )
        with np.errstate(all="ignore"):
            best = np.nanmin(np.where(np.isnan(t), np.inf, t), axis=1)
        best[np.isinf(best)] = np.nan
        expected = front_pose.transform(origin + best[:, None] * dirs)[:, 2]
        np.testing.assert_allclose(depth, expected, rtol=1e-12, equal_nan=True)

    def test_depth_pixels_must_be_in_bounds(self, sphere, k, front_pose):
        with pytest.raises(OutOfBounds):
            render_depth(sphere, front_pose, k, np.array([[400.0, 10.0]]))


class TestTexture:
    def test_constant_image_colours_front_faces(self, sphere, k, front_pose):
        image = np.full((240, 320), 200.0)
        updated = texture_update(sphere, front_pose, image, k)
        assert updated > 0
        touched = sphere.face_weights > 0
        assert touched.sum() == updated
        np.testing.assert_allclose(sphere.face_colors[touched], 200.0)
        np.testing.assert_allclose(sphere.face_colors[~touched], 128.0)
        # only faces turned towards the camera
        assert np.all(sphere.face_normals[touched, 2] < 0)

    def test_weight_saturates(self, sphere, k, front_pose):
        image = np.full((240, 320), 50.0)
        for _ in range(15):
            texture_update(sphere, front_pose, image, k)
        assert sphere.face_weights.max() == 10.0

    def test_running_average(self, sphere, k, front_pose):
        texture_update(sphere, front_pose, np.full((240, 320), 100.0), k)
        texture_update(sphere, front_pose, np.full((240, 320), 200.0), k)
        touched = sphere.face_weights > 0
        np.testing.assert_allclose(sphere.face_colors[touched], 150.0)

    def test_image_shape_checked(self, sphere, k, front_pose):
        with pytest.raises(ValueError):
            texture_update(sphere, front_pose, np.zeros((10, 10)), k)
