"""
Run orchestration: input loading, the tracking loop, global BA, metrics and artifacts,
plus the paired-seed ablation runner.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .configs.models import RunConfig
from .data_loader import (
    iter_image_dir,
    read_correspondences,
    read_pose_file,
    save_image_frames,
    write_correspondences,
    write_ground_truth,
    write_observation_log,
    write_pose_file,
    write_trajectory,
)
from .errors import EmptyOverlap, MarkerNotVisible, PreconditionError
from .evaluation import (
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
from .features import FrameObservations
from .geometry import Intrinsics, Pose
from .optimizer import BaResult, problem_from_map
from .pipeline import FrameResult, Tracker, TrackingState
from .prior_shape import TriangleMesh, load_mesh, save_ply
from .registration import RegistrationResult, correspondences_from_arrays, solve_initial_registration
from .simulator import GroundTruth, Scenario, generate_scenario, render_synthetic_images, stream_frames

logger = logging.getLogger(__name__)

FrameItem = Union[FrameObservations, np.ndarray]


@dataclass
class RunInputs:
    mesh: TriangleMesh
    k: Intrinsics
    t_init: Pose
    frames: Iterator[Tuple[int, FrameItem, float]]
    n_frames: Optional[int] = None
    ground_truth: Optional[GroundTruth] = None
    scenario: Optional[Scenario] = None


@dataclass
class RunOutcome:
    report: MetricsReport
    results: List[FrameResult]
    tracker: Tracker
    global_ba: Optional[BaResult] = None
    artifacts: Dict[str, Path] = field(default_factory=dict)


class RunOrchestrator:
    def __init__(self, config: RunConfig):
        self.config = config

    # =====================
    # Inputs
    # =====================

    def load_inputs(self) -> RunInputs:
        config = self.config
        if config.scenario is not None:
            spec = config.scenario.model_copy(update={"seed": config.seed})
            scenario = generate_scenario(spec, stream=True)
            gt = scenario.ground_truth
            if config.image_mode:
                frames = (
                    (i, image, float(gt.frame_times[i]))
                    for i, image in enumerate(render_synthetic_images(spec, gt, scenario.mesh.copy()))
                )
            else:
                frames = ((f.frame_id, f, f.timestamp) for f in stream_frames(spec, scenario.mesh, gt))
            return RunInputs(scenario.mesh, spec.intrinsics, scenario.t_init, frames, spec.n_frames, gt, scenario)

        images = config.images
        mesh = load_mesh(images.mesh)
        if images.t_init is not None:
            t_init = read_pose_file(images.t_init)
        else:
            t_init = register_from_csv(images.correspondences, images.intrinsics, self.config).pose
        frames = ((i, image, float(i)) for i, image in iter_image_dir(images.image_dir))
        return RunInputs(mesh, images.intrinsics, t_init, frames)

    def build_tracker(self, inputs: RunInputs) -> Tracker:
        config = self.config
        tracker_config = config.tracker.model_copy(update={"parallel": not config.deterministic})
        return Tracker(
            inputs.mesh,
            inputs.k,
            tracker_config,
            config.optimizer,
            config.registration,
            config.toggles,
            seed=config.seed,
        )

    # =====================
    # Tracking loop
    # =====================

    def _track(self, tracker: Tracker, inputs: RunInputs) -> Tuple[List[FrameResult], bool, float]:
        results: List[FrameResult] = []
        init_success = True
        giving_up = False
        tracking_seconds = 0.0
        two_view = not self.config.toggles.prior_init

        for frame_id, item, timestamp in inputs.frames:
            start = time.perf_counter()
            if tracker.state == TrackingState.NOT_INITIALIZED:
                if giving_up:
                    result = FrameResult(frame_id, TrackingState.NOT_INITIALIZED)
                elif two_view:
                    result = tracker.initialize_two_view(item, frame_id, timestamp)
                    if result.state == TrackingState.NOT_INITIALIZED and frame_id + 1 >= self.config.tracker.two_view_max_frames:
                        logger.warning(f"[Orchestrator] two-view initialization failed within {frame_id + 1} frames")
                        init_success, giving_up = False, True
                else:
                    tracker.initialize(item, inputs.t_init, frame_id, timestamp)
                    elapsed = 1e3 * (time.perf_counter() - start)
                    result = FrameResult(frame_id, TrackingState.TRACKING, inputs.t_init, 0, 1.0,
                                         {"total": elapsed}, keyframe=True)
            else:
                result = tracker.process_frame(item, frame_id, timestamp)
            tracking_seconds += time.perf_counter() - start
            results.append(result)
        return results, init_success, tracking_seconds

    # =====================
    # Metrics
    # =====================

    def _metrics(self, tracker: Tracker, inputs: RunInputs, results: List[FrameResult], init_success: bool) -> Metrics:
        lost = [r.state != TrackingState.TRACKING for r in results]
        pooled, per_sequence = lost_fractions([lost])
        metrics = Metrics(
            lost_fraction=pooled,
            lost_fraction_per_sequence=per_sequence,
            lost_frames=int(sum(lost)),
            total_frames=len(results),
            init_success=init_success,
            keyframes=len(tracker.slam_map.keyframes) if tracker.slam_map else 0,
            map_points=len(tracker.slam_map.points) if tracker.slam_map else 0,
            relocalizations=sum(1 for t in tracker.transitions if t.source == TrackingState.LOST),
        )
        gt = inputs.ground_truth
        if gt is None or not tracker.mesh_frame or tracker.slam_map is None:
            return metrics

        est = {r.frame_id: r.pose for r in results}
        truth = dict(enumerate(gt.relative_poses))
        try:
            trans, rot = compute_traj_error(est, truth)
            metrics.trans_rmse, metrics.rot_rmse_deg = trans, float(np.degrees(rot))
        except EmptyOverlap as e:
            logger.warning(f"[Orchestrator] no trajectory error: {e}")

        tracked = [r.frame_id for r in results if r.pose is not None]
        values, used = [], []
        for frame_id in sample_tre_frames(tracked, seed=self.config.seed):
            try:
                values.append(compute_tre(gt.markers, est[frame_id], truth[frame_id], gt.k))
                used.append(frame_id)
            except MarkerNotVisible as e:
                logger.debug(f"[Orchestrator] frame {frame_id} skipped for TRE: {e}")
        if values:
            metrics.tre_px = TreSummary.from_values(values, used)

        if self.config.image_mode:
            # detector track ids are not simulator feature ids
            return metrics
        organ_points = [
            (p.position, gt.points[p.feature_id])
            for p in tracker.slam_map.points.values()
            if p.feature_id is not None and 0 <= p.feature_id < len(gt.points) and gt.is_organ[p.feature_id]
        ]
        if organ_points:
            est_pts, true_pts = (np.array(a) for a in zip(*organ_points))
            metrics.scale_error = compute_scale_error(est_pts, true_pts, inputs.mesh.centroid)
        return metrics

    # =====================
    # Entry points
    # =====================

    def execute(self, write_artifacts: bool = True) -> RunOutcome:
        config = self.config
        start = time.perf_counter()
        inputs = self.load_inputs()
        tracker = self.build_tracker(inputs)
        try:
            results, init_success, tracking_seconds = self._track(tracker, inputs)
            ba = None
            if config.global_ba_at_end and tracker.slam_map is not None and len(tracker.slam_map.keyframes) >= 2:
                ba = tracker.run_global_ba()
        finally:
            tracker.close()

        metrics = self._metrics(tracker, inputs, results, init_success)
        timing = Timing(
            fps=len(results) / tracking_seconds if tracking_seconds > 0 else 0.0,
            wall_s=time.perf_counter() - start,
            stages=timing_percentiles([r.timing for r in results]),
        )
        report = MetricsReport(
            config_hash=config.config_hash(),
            metrics=metrics,
            timing=timing,
            toggles=config.toggles.model_dump(),
        )
        if ba is not None:
            report.metadata["global_ba"] = {
                "initial_cost": ba.initial_cost,
                "final_cost": ba.final_cost,
                "iterations": ba.iterations,
            }
        outcome = RunOutcome(report, results, tracker, ba)
        if write_artifacts:
            outcome.artifacts = self.write_artifacts(outcome, inputs)
        logger.info(
            f"[Orchestrator] {len(results)} frames, lost {metrics.lost_fraction:.3f}, "
            f"trans RMSE {metrics.trans_rmse}, {timing.fps:.1f} fps"
        )
        return outcome

    def run(self) -> MetricsReport:
        return self.execute().report

    def write_artifacts(self, outcome: RunOutcome, inputs: RunInputs) -> Dict[str, Path]:
        out = Path(self.config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "trajectory": write_trajectory(
                out / "trajectory.csv", outcome.results, include_timing=not self.config.deterministic
            ),
            "mesh": save_ply(outcome.tracker.mesh, out / "textured.ply"),
            "report": outcome.report.write(out / "report.json"),
        }
        transitions = pd.DataFrame(
            [(t.frame_id, t.source.value, t.target.value, t.reason) for t in outcome.tracker.transitions],
            columns=["frame_id", "from", "to", "reason"],
        )
        transitions.to_csv(out / "transitions.csv", index=False)
        paths["transitions"] = out / "transitions.csv"
        if self.config.save_plot and inputs.ground_truth is not None and outcome.tracker.mesh_frame:
            errors = relative_errors(
                {r.frame_id: r.pose for r in outcome.results}, dict(enumerate(inputs.ground_truth.relative_poses))
            )
            if not errors.empty:
                paths["plot"] = plot_trajectory_errors(errors, out / "trajectory_errors.png")
        return paths

    def export_ba_problem(self, tracker: Tracker, path: Union[str, Path]) -> Path:
        """Text dump of the global BA problem over the tracker's map."""
        if tracker.slam_map is None:
            raise PreconditionError("no map to export")
        with tracker.slam_map.lock.read():
            problem, _, _ = problem_from_map(tracker.slam_map, sorted(tracker.slam_map.keyframes), None, False)
        path = Path(path)
        path.write_text(problem.to_text(), encoding="utf-8")
        return path

    # =====================
    # Ablation
    # =====================

    def ablate(self, toggle: str, seeds: List[int]) -> List[Dict[str, Any]]:
        """
        Paired runs per seed: the configured toggles and the same toggles with `toggle`
        flipped. Each report's metadata records the single toggle that changed.
        """
        base = self.config
        rows = []
        for seed in seeds:
            pair = {}
            for label, toggles in (("base", base.toggles), ("flipped", base.toggles.flipped(toggle))):
                changed = sorted(
                    name for name, value in toggles.model_dump().items() if getattr(base.toggles, name) != value
                )
                if label == "flipped" and changed != [toggle]:
                    raise PreconditionError(f"ablation must change exactly '{toggle}', changed {changed}")
                run_config = base.model_copy(update={
                    "seed": seed,
                    "toggles": toggles,
                    "output_dir": Path(base.output_dir) / f"seed_{seed}" / f"{toggle}_{label}",
                })
                report = RunOrchestrator(run_config).run()
                report.metadata["ablation"] = {"toggle": toggle, "value": getattr(toggles, toggle), "changed": changed}
                report.write(Path(run_config.output_dir) / "report.json")
                pair[label] = report
            rows.append({"seed": seed, "toggle": toggle, **pair})
            logger.info(
                f"[Ablation] seed {seed} {toggle}: lost {pair['base'].metrics.lost_fraction:.3f} "
                f"-> {pair['flipped'].metrics.lost_fraction:.3f}"
            )

        summary = pd.DataFrame([
            {
                "seed": r["seed"],
                "toggle": toggle,
                f"lost_{toggle}_{getattr(base.toggles, toggle)}": r["base"].metrics.lost_fraction,
                f"lost_{toggle}_{not getattr(base.toggles, toggle)}": r["flipped"].metrics.lost_fraction,
                "init_base": r["base"].metrics.init_success,
                "init_flipped": r["flipped"].metrics.init_success,
            }
            for r in rows
        ])
        out = Path(base.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary.to_csv(out / f"ablation_{toggle}.csv", index=False)
        return rows


# =====================
# Standalone helpers
# =====================

def register_from_csv(path: Union[str, Path, bytes], k: Intrinsics, config: Optional[RunConfig] = None) -> RegistrationResult:
    points, pixels = read_correspondences(path)
    reg_config = config.registration if config is not None else None
    return solve_initial_registration(correspondences_from_arrays(points, pixels), k, reg_config)


def simulate(config: RunConfig) -> Dict[str, Path]:
    """Write a scenario's observation log, ground truth, T_init, correspondences and optional frames."""
    if config.scenario is None:
        raise PreconditionError("simulate needs a scenario input")
    spec = config.scenario.model_copy(update={"seed": config.seed})
    scenario = generate_scenario(spec)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "observations": write_observation_log(out / "observations.csv", scenario.frames, spec.intrinsics, spec.n_frames),
        "ground_truth": write_ground_truth(out / "ground_truth.csv", scenario.ground_truth),
        "t_init": write_pose_file(out / "t_init.txt", scenario.t_init),
        "correspondences": write_correspondences(
            out / "correspondences.csv", scenario.correspondence_points, scenario.correspondence_pixels
        ),
        "mesh": save_ply(scenario.mesh, out / "organ.ply"),
    }
    if config.image_mode:
        save_image_frames(render_synthetic_images(spec, scenario.ground_truth, scenario.mesh), out / "frames")
        paths["frames"] = out / "frames"
    return paths
