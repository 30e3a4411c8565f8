import json

import numpy as np
import pytest
from pydantic import ValidationError

from shape_tracker.errors import EmptyOverlap, MarkerNotVisible
from shape_tracker.evaluation import (
    Metrics,
    MetricsReport,
    Timing,
    TreSummary,
    compute_scale_error,
    compute_traj_error,
    compute_tre,
    lost_fractions,
    plot_trajectory_errors,
    relative_errors,
    sample_tre_frames,
    timing_percentiles,
)
from shape_tracker.geometry import Pose

MARKERS = np.array([[0.0, 0.0, 0.0], [0.3, 0.1, 0.0], [-0.2, 0.25, 0.1]])


class TestTre:
    def test_identical_poses(self, k, front_pose):
        assert compute_tre(MARKERS, front_pose, front_pose, k) == 0.0

    def test_principal_point_offset_is_one_pixel(self, k, front_pose):
        shifted = k.model_copy(update={"cx": k.cx + 1.0})
        assert compute_tre(MARKERS, front_pose, front_pose, k, k_est=shifted) == pytest.approx(1.0, abs=1e-12)

    def test_roll_about_optical_axis(self, k, front_pose):
        roll = Pose.from_rotvec([0.0, 0.0, np.radians(10.0)], np.zeros(3)).compose(front_pose)
        # the marker on the axis stays put, the others move by 2 r sin(5 deg)
        radii = np.linalg.norm(k.fx * MARKERS[:, :2] / (4.0 + MARKERS[:, 2:]), axis=1)
        expected = np.mean(2.0 * radii * np.sin(np.radians(5.0)))
        assert compute_tre(MARKERS, roll, front_pose, k) == pytest.approx(expected, rel=1e-9)

    def test_marker_outside_ground_truth_view(self, k, front_pose):
        with pytest.raises(MarkerNotVisible):
            compute_tre(np.array([[5.0, 0.0, 0.0]]), front_pose, front_pose, k)

    def test_marker_behind_estimate(self, k, front_pose):
        behind = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, -4.0]))
        with pytest.raises(MarkerNotVisible):
            compute_tre(MARKERS, behind, front_pose, k)


class TestTrajectoryError:
    def test_identical_tracks(self, front_pose):
        assert compute_traj_error([front_pose] * 3, [front_pose] * 3) == (0.0, 0.0)

    def test_unit_offset_along_optical_axis(self, front_pose):
        moved = Pose(front_pose.quaternion, front_pose.translation + [0.0, 0.0, 1.0])
        trans, rot = compute_traj_error({0: moved, 1: moved}, {0: front_pose, 1: front_pose})
        assert trans == pytest.approx(1.0) and rot == pytest.approx(0.0, abs=1e-12)

    def test_lost_frames_are_excluded(self, front_pose):
        moved = Pose(front_pose.quaternion, front_pose.translation + [0.0, 3.0, 0.0])
        errors = relative_errors({0: front_pose, 1: None, 2: moved}, {0: front_pose, 1: front_pose, 2: front_pose})
        assert errors["lost"].tolist() == [False, True, False]
        trans, _ = compute_traj_error({0: front_pose, 1: None, 2: moved}, {i: front_pose for i in range(3)})
        assert trans == pytest.approx(np.sqrt(9.0 / 2.0))

    def test_rotation_error_in_radians(self, front_pose):
        turned = Pose.from_rotvec([0.0, 0.1, 0.0], np.zeros(3)).compose(front_pose)
        _, rot = compute_traj_error([turned], [front_pose])
        assert rot == pytest.approx(0.1)

    def test_no_overlap(self, front_pose):
        with pytest.raises(EmptyOverlap):
            compute_traj_error({0: None}, {0: front_pose})
        with pytest.raises(EmptyOverlap):
            compute_traj_error({5: front_pose}, {0: front_pose})


class TestSummaries:
    def test_scale_error(self):
        truth = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert compute_scale_error(1.02 * truth, truth, np.zeros(3)) == pytest.approx(0.02)
        with pytest.raises(EmptyOverlap):
            compute_scale_error(np.zeros((0, 3)), truth, np.zeros(3))

    def test_lost_fractions(self):
        pooled, per_sequence = lost_fractions([[True, False, False, False], [True, True]])
        assert pooled == pytest.approx(0.5)
        assert per_sequence == [0.25, 1.0]
        assert lost_fractions([]) == (0.0, [])

    def test_sample_tre_frames(self):
        frames = list(range(100))
        sample = sample_tre_frames(frames, count=20, seed=4)
        assert len(sample) == 20 and len(set(sample)) == 20
        assert sample == sorted(sample)
        assert sample == sample_tre_frames(frames, count=20, seed=4)
        assert sample_tre_frames([3, 1], count=20) == [1, 3]

    def test_timing_percentiles(self):
        timings = [{"total": float(v), "pose": 1.0} for v in range(1, 101)]
        stats = timing_percentiles(timings)
        assert stats["total"]["p50"] == pytest.approx(50.5)
        assert stats["total"]["mean"] == pytest.approx(50.5)
        assert stats["pose"]["p99"] == 1.0
        assert timing_percentiles([]) == {}

    def test_tre_summary(self):
        summary = TreSummary.from_values([1.0, 2.0, 6.0], [4, 8, 9])
        assert (summary.mean, summary.median, summary.max) == (3.0, 2.0, 6.0)


class TestReport:
    def test_metrics_validation(self):
        with pytest.raises(ValidationError):
            Metrics(lost_fraction=1.5)
        with pytest.raises(ValidationError):
            Metrics(lost_fraction=0.0, trans_rmse=float("nan"))

    def test_deterministic_json_drops_timing(self, tmp_path):
        report = MetricsReport(
            config_hash="abc",
            metrics=Metrics(lost_fraction=0.1, total_frames=10, lost_frames=1),
            timing=Timing(fps=31.0, wall_s=2.0),
            toggles={"prior_init": True},
        )
        data = json.loads(report.deterministic_json())
        assert "timing" not in data and data["metrics"]["lost_frames"] == 1
        path = report.write(tmp_path / "sub" / "report.json")
        assert json.loads(path.read_text())["timing"]["fps"] == 31.0
        other = report.model_copy(update={"timing": Timing(fps=5.0)})
        assert other.deterministic_json() == report.deterministic_json()

    def test_plot(self, tmp_path, front_pose):
        errors = relative_errors({0: front_pose, 1: None, 2: front_pose}, {i: front_pose for i in range(3)})
        path = plot_trajectory_errors(errors, tmp_path / "errors.png", title="run")
        assert path.exists() and path.stat().st_size > 0
