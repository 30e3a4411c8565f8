import json

import numpy as np
import pandas as pd
import pytest

from shape_tracker.cli import build_parser, load_config, main, parse_toggle
from shape_tracker.data_loader import read_pose_file, read_trajectory
from shape_tracker.errors import ConfigError

SCENARIO = """
[scenario]
preset = "default"
n_frames = {n_frames}
organ_features = 250
seed = 3
{extra}

[scenario.organ]
kind = "icosphere"
subdivisions = 3

[scenario.background]
count = 150

[scenario.noise]
pixel_sigma = 0.5

[scenario.intrinsics]
fx = 300.0
fy = 300.0
cx = 160.0
cy = 120.0
width = 320
height = 240

[scenario.camera]
waypoints = [{{ eye = [0.0, 0.0, 4.0] }}, {{ eye = [0.4, 0.1, 3.9] }}]
"""


def write_config(tmp_path, n_frames=25, head="seed = 3\nsave_plot = false\n", extra=""):
    path = tmp_path / "run.toml"
    path.write_text(head + SCENARIO.format(n_frames=n_frames, extra=extra), encoding="utf-8")
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestArguments:
    @pytest.mark.parametrize("text, expected", [
        ("pseudo_mask", ("pseudo_mask", None)),
        ("pseudo-mask=off", ("pseudo_mask", False)),
        ("prior_init=ON", ("prior_init", True)),
        ("shape_prior_ba=0", ("shape_prior_ba", False)),
    ])
    def test_parse_toggle(self, text, expected):
        assert parse_toggle(text) == expected

    def test_bad_toggle_value(self):
        with pytest.raises(ConfigError):
            parse_toggle("pseudo_mask=maybe")

    def test_overrides(self, tmp_path):
        path = write_config(tmp_path)
        args = build_parser().parse_args([
            "track", "--config", str(path), "--seed", "11", "--deterministic",
            "--out", str(tmp_path / "o"), "--toggle", "pseudo_mask=off", "--toggle", "shape_prior_ba=on",
        ])
        config = load_config(args)
        assert config.seed == 11 and config.deterministic
        assert config.output_dir == tmp_path / "o"
        assert config.toggles.pseudo_mask is False and config.toggles.shape_prior_ba is True

    def test_bare_toggle_flips_configured_value(self, tmp_path):
        path = write_config(tmp_path)
        args = build_parser().parse_args(["track", "--config", str(path), "--toggle", "prior_init"])
        assert load_config(args).toggles.prior_init is False
        args = build_parser().parse_args([
            "track", "--config", str(path), "--toggle", "prior_init=false", "--toggle", "prior_init",
        ])
        assert load_config(args).toggles.prior_init is True

    def test_needs_config_or_preset(self, tmp_path):
        args = build_parser().parse_args(["track"])
        with pytest.raises(ConfigError):
            load_config(args)


class TestTrack:
    def test_writes_artifacts_and_report(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert run_cli("track", "--config", write_config(tmp_path), "--out", out, "--deterministic") == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["success"] is True
        for name in ("trajectory.csv", "report.json", "textured.ply", "transitions.csv"):
            assert (out / name).exists()
        report = json.loads((out / "report.json").read_text())
        metrics = report["metrics"]
        assert metrics["lost_fraction"] == 0.0 and metrics["total_frames"] == 25
        assert metrics["init_success"] is True
        assert metrics["trans_rmse"] < 0.05
        assert metrics["tre_px"]["mean"] < 5.0
        assert abs(metrics["scale_error"]) < 0.05
        assert report["toggles"] == {"prior_init": True, "pseudo_mask": True, "shape_prior_ba": True}
        assert report["metadata"]["global_ba"]["final_cost"] <= report["metadata"]["global_ba"]["initial_cost"]
        track = read_trajectory(out / "trajectory.csv")
        assert sorted(track) == list(range(25))

    def test_deterministic_runs_are_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        for name in ("a", "b"):
            assert run_cli("track", "--config", config, "--out", tmp_path / name, "--deterministic") == 0
        for name in ("trajectory.csv", "textured.ply", "transitions.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        reports = [json.loads((tmp_path / n / "report.json").read_text()) for n in ("a", "b")]
        for report in reports:
            report.pop("timing")
        assert reports[0] == reports[1]

    def test_without_prior_init_reports_no_mesh_frame_metrics(self, tmp_path):
        out = tmp_path / "out"
        config = write_config(tmp_path, n_frames=30)
        assert run_cli("track", "--config", config, "--out", out, "--deterministic",
                       "--toggle", "prior_init=off") == 0
        metrics = json.loads((out / "report.json").read_text())["metrics"]
        assert metrics["trans_rmse"] is None and metrics["tre_px"] is None

    def test_image_mode_reports_no_scale_error(self, tmp_path):
        out = tmp_path / "out"
        config = write_config(tmp_path, n_frames=6, head="seed = 3\nsave_plot = false\nimage_mode = true\n")
        assert run_cli("track", "--config", config, "--out", out, "--deterministic") == 0
        metrics = json.loads((out / "report.json").read_text())["metrics"]
        assert metrics["scale_error"] is None
        assert metrics["total_frames"] == 6

    @pytest.mark.slow
    def test_default_scenario_recovers_scale(self, tmp_path):
        path = tmp_path / "default.toml"
        path.write_text('seed = 0\nsave_plot = false\n\n[scenario]\npreset = "default"\nn_frames = 300\n')
        out = tmp_path / "out"
        assert run_cli("track", "--config", path, "--out", out, "--deterministic") == 0
        metrics = json.loads((out / "report.json").read_text())["metrics"]
        assert abs(metrics["scale_error"]) < 0.01

    def test_bad_config_writes_error_record(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[scenario]\npreset = "default"\n[tracker]\nturbo = true\n')
        out = tmp_path / "out"
        assert run_cli("track", "--config", path, "--out", out) == 1
        record = json.loads((out / "error.json").read_text())
        assert record["success"] is False and record["error_type"] == "ConfigError"
        assert record["module"] == "eval_cli"


class TestSimulateAndRegister:
    def test_simulate_then_register(self, tmp_path):
        out = tmp_path / "sim"
        assert run_cli("simulate", "--config", write_config(tmp_path, n_frames=5), "--out", out) == 0
        for name in ("observations.csv", "ground_truth.csv", "t_init.txt", "correspondences.csv", "organ.ply"):
            assert (out / name).exists()
        truth = read_pose_file(out / "t_init.txt")

        reg = tmp_path / "reg"
        assert run_cli("register", "--correspondences", out / "correspondences.csv",
                       "--intrinsics", "300,300,160,120,320,240", "--out", reg) == 0
        record = json.loads((reg / "registration.json").read_text())
        assert record["rms_px"] < 1e-3
        assert len(record["per_start_residuals"]) == 72
        estimate = read_pose_file(reg / "t_init.txt")
        np.testing.assert_allclose(estimate.translation, truth.translation, atol=1e-4)

    def test_register_bad_intrinsics(self, tmp_path):
        csv = tmp_path / "c.csv"
        csv.write_text("x,y,z,u,v\n")
        assert run_cli("register", "--correspondences", csv, "--intrinsics", "1,2,3", "--out", tmp_path) == 1
        assert json.loads((tmp_path / "error.json").read_text())["error_type"] == "ConfigError"

    def test_track_from_image_directory(self, tmp_path):
        sim = tmp_path / "sim"
        config = write_config(tmp_path, n_frames=6, head="seed = 3\nimage_mode = true\n")
        assert run_cli("simulate", "--config", config, "--out", sim) == 0
        assert len(list((sim / "frames").glob("*.png"))) == 6

        images = tmp_path / "images.toml"
        images.write_text(
            "deterministic = true\nsave_plot = false\n[images]\n"
            f'image_dir = "{(sim / "frames").as_posix()}"\n'
            f'mesh = "{(sim / "organ.ply").as_posix()}"\n'
            f'correspondences = "{(sim / "correspondences.csv").as_posix()}"\n'
            "[images.intrinsics]\nfx = 300.0\nfy = 300.0\ncx = 160.0\ncy = 120.0\nwidth = 320\nheight = 240\n"
        )
        out = tmp_path / "out"
        assert run_cli("texture-export", "--config", images, "--out", out) == 0
        trajectory = pd.read_csv(out / "trajectory.csv")
        assert (trajectory["state"] == "Tracking").all()
        header = (out / "textured.ply").read_text().splitlines()[:12]
        assert header[0] == "ply"


class TestAblateAndGlobalBa:
    def test_ablation_pairs(self, tmp_path, capsys):
        out = tmp_path / "abl"
        assert run_cli("ablate", "--config", write_config(tmp_path, n_frames=15), "--out", out,
                       "--deterministic", "--toggle", "pseudo_mask", "--seeds", "3,4") == 0
        printed = json.loads(capsys.readouterr().out)
        assert [p["seed"] for p in printed["pairs"]] == [3, 4]
        summary = pd.read_csv(out / "ablation_pseudo_mask.csv")
        assert summary["seed"].tolist() == [3, 4]
        flipped = json.loads((out / "seed_4" / "pseudo_mask_flipped" / "report.json").read_text())
        assert flipped["metadata"]["ablation"] == {"toggle": "pseudo_mask", "value": False, "changed": ["pseudo_mask"]}
        assert flipped["toggles"]["pseudo_mask"] is False

    def test_ablate_needs_one_toggle(self, tmp_path):
        assert run_cli("ablate", "--config", write_config(tmp_path), "--out", tmp_path) == 1

    def test_global_ba_exports_problem(self, tmp_path):
        out = tmp_path / "gba"
        assert run_cli("global-ba", "--config", write_config(tmp_path), "--out", out, "--deterministic") == 0
        record = json.loads((out / "global_ba.json").read_text())
        assert record["final_cost"] <= record["initial_cost"]
        assert (out / "ba_problem.txt").read_text().strip()
