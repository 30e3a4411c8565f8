"""
Tracking state machine: prior-shape initialization from simulated depth, per-frame
pseudo-mask tracking, keyframe mapping, loss detection and relocalization.

Two operating modes: deterministic (mapping runs inline after each keyframe) and
parallel (a MappingWorker thread consumes keyframes from a bounded queue).
"""
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .configs.models import OptimizerConfig, RegistrationConfig, RunToggles, TrackerConfig
from .errors import (
    Diverged,
    InsufficientDepthPoints,
    NotInitialized,
    PreconditionError,
    ShapeTrackerError,
    TooFewObservations,
)
from .features import FrameObservations, ImageFrontend, filter_by_mask, match_descriptors, window_candidates
from .geometry import Intrinsics, Pose, project_points, triangulate
from .optimizer import (
    BaResult,
    bundle_adjust,
    local_bundle_adjust,
    optimize_pose,
    problem_from_map,
    reprojection_residuals,
    write_back,
)
from .prior_shape import (
    BinaryMask,
    SurfaceIndex,
    TriangleMesh,
    build_surface_index,
    render_depth,
    render_mask,
    scaled_dilation,
    texture_update,
)
from .registration import count_inliers, correspondences_from_arrays, solve_initial_registration
from .slam_map import PointOrigin, SlamMap
from .two_view import TwoViewInitializer

logger = logging.getLogger(__name__)

FrameInput = Union[FrameObservations, np.ndarray]


class TrackingState(str, Enum):
    NOT_INITIALIZED = "NotInitialized"
    TRACKING = "Tracking"
    LOST = "Lost"


_LEGAL_TRANSITIONS = {
    (TrackingState.NOT_INITIALIZED, TrackingState.TRACKING),
    (TrackingState.TRACKING, TrackingState.LOST),
    (TrackingState.LOST, TrackingState.TRACKING),
}


@dataclass(frozen=True)
class Transition:
    frame_id: int
    source: TrackingState
    target: TrackingState
    reason: str


@dataclass
class FrameResult:
    frame_id: int
    state: TrackingState
    pose: Optional[Pose] = None
    inlier_count: int = 0
    mask_coverage: float = 1.0
    timing: Dict[str, float] = field(default_factory=dict)
    keyframe: bool = False
    relocalized: bool = False

    def __post_init__(self) -> None:
        if (self.pose is not None) != (self.state == TrackingState.TRACKING):
            raise ValueError("a pose is reported exactly when the state is Tracking")


@dataclass
class _KeyframeJob:
    keyframe_id: int
    reference_id: Optional[int]
    image: Optional[np.ndarray]


class MappingWorker(threading.Thread):
    """Consumes keyframe jobs in insertion order; `submit` blocks when the queue is full."""

    def __init__(self, tracker: "Tracker", queue_size: int):
        super().__init__(name="mapping-worker", daemon=True)
        self.tracker = tracker
        self.jobs: "queue.Queue[Optional[_KeyframeJob]]" = queue.Queue(maxsize=queue_size)
        self.error: Optional[BaseException] = None

    def submit(self, job: _KeyframeJob) -> None:
        self.jobs.put(job)

    def run(self) -> None:
        while True:
            job = self.jobs.get()
            try:
                if job is None:
                    return
                self.tracker._map_keyframe(job)
            except Exception as e:  # keep consuming; the tracker reports it
                logger.exception(f"[MappingWorker] keyframe job failed: {e}")
                self.error = e
            finally:
                self.jobs.task_done()

    def drain(self) -> None:
        self.jobs.join()

    def stop(self) -> None:
        self.jobs.put(None)
        self.join()


class Tracker:
    """
    Model-based monocular tracker anchored to the prior mesh frame.

    With `toggles.prior_init` the map is initialized from one frame by ray casting the
    mesh at `t_init`; otherwise a two-view initialization in an arbitrary frame is used
    and the mesh-dependent stages (pseudo mask, shape prior, texturing) are skipped.
    """

    def __init__(
        self,
        mesh: TriangleMesh,
        k: Intrinsics,
        config: Optional[TrackerConfig] = None,
        optimizer_config: Optional[OptimizerConfig] = None,
        registration_config: Optional[RegistrationConfig] = None,
        toggles: Optional[RunToggles] = None,
        surface: Optional[SurfaceIndex] = None,
        seed: int = 0,
    ):
        self.mesh = mesh
        self.k = k
        self.config = config or TrackerConfig()
        self.toggles = toggles or RunToggles()
        self.optimizer_config = optimizer_config or OptimizerConfig()
        self.registration_config = registration_config or RegistrationConfig()
        self.seed = seed
        self.surface = surface
        self.dilation_px = (
            self.config.dilation_px if self.config.dilation_px is not None else scaled_dilation(k)
        )

        self.slam_map: Optional[SlamMap] = None
        self.state = TrackingState.NOT_INITIALIZED
        self._transitions: List[Transition] = []
        self.frontend = ImageFrontend(self.config.max_features, self.config.fast_threshold)
        self.two_view: Optional[TwoViewInitializer] = None
        self._texture_lock = threading.Lock()

        self.last_pose: Optional[Pose] = None
        self._velocity: Optional[Pose] = None
        self._frames_since_keyframe = 0
        self._reference_kf: Optional[int] = None
        self._last_reloc_inliers = 0
        self.worker: Optional[MappingWorker] = None
        if self.config.parallel:
            self.worker = MappingWorker(self, self.config.mapping_queue_size)
            self.worker.start()

    # =====================
    # State
    # =====================

    @property
    def mesh_frame(self) -> bool:
        """True when poses live in the mesh frame (prior-shape initialization)."""
        return self.toggles.prior_init

    @property
    def transitions(self) -> Tuple[Transition, ...]:
        return tuple(self._transitions)

    def _transition(self, frame_id: int, target: TrackingState, reason: str) -> None:
        if (self.state, target) not in _LEGAL_TRANSITIONS:
            raise PreconditionError(f"illegal transition {self.state.value} -> {target.value}")
        self._transitions.append(Transition(frame_id, self.state, target, reason))
        logger.info(f"[Tracker] frame {frame_id}: {self.state.value} -> {target.value} ({reason})")
        self.state = target

    def _shape_surface(self) -> Optional[SurfaceIndex]:
        if not (self.toggles.shape_prior_ba and self.mesh_frame):
            return None
        if self.surface is None:
            self.surface = build_surface_index(self.mesh, self.config.surface_density, seed=self.seed)
        return self.surface

    def _ba_config(self) -> OptimizerConfig:
        if self._shape_surface() is None:
            return self.optimizer_config.model_copy(update={"w_shape": 0.0})
        return self.optimizer_config

    def _acquire(
        self,
        frame: FrameInput,
        frame_id: Optional[int],
        timestamp: float,
        mask: Optional[BinaryMask] = None,
    ) -> Tuple[FrameObservations, Optional[np.ndarray]]:
        if isinstance(frame, FrameObservations):
            return frame, None
        image = np.asarray(frame)
        fid = frame_id if frame_id is not None else len(self._transitions)
        return self.frontend.process(image, fid, timestamp, mask), image

    def _in_bounds(self, frame: FrameObservations) -> FrameObservations:
        if not frame.observations:
            return frame
        return frame.subset(self.k.in_bounds(frame.pixels))

    def _mask(self, pose: Pose) -> BinaryMask:
        if self.toggles.pseudo_mask and self.mesh_frame:
            return render_mask(self.mesh, pose, self.k, self.dilation_px)
        return BinaryMask.full(self.k)

    # =====================
    # Initialization
    # =====================

    def initialize(
        self,
        frame: FrameInput,
        t_init: Pose,
        frame_id: Optional[int] = None,
        timestamp: float = 0.0,
    ) -> SlamMap:
        """Single-frame initialization: every feature hit by a mesh ray becomes a map point."""
        if self.state != TrackingState.NOT_INITIALIZED:
            raise PreconditionError("tracker already initialized")
        frame, image = self._acquire(frame, frame_id, timestamp, self._mask(t_init))
        frame = self._in_bounds(frame)
        pixels = frame.pixels
        depth = render_depth(self.mesh, t_init, self.k, pixels) if len(pixels) else np.zeros(0)
        hit = ~np.isnan(depth)
        if hit.sum() < self.config.min_init_points:
            raise InsufficientDepthPoints(
                f"{int(hit.sum())} features received depth, need >= {self.config.min_init_points}"
            )

        frame = frame.subset(hit)
        depth = depth[hit]
        xy = self.k.normalize(frame.pixels)
        cam = np.column_stack([xy * depth[:, None], depth])
        world = t_init.inverse().transform(cam)

        slam_map = SlamMap(self.k)
        kf = slam_map.add_keyframe(frame, t_init, fixed=True, image=image)
        for i, p in enumerate(world):
            slam_map.add_point(p, PointOrigin.PRIOR_DEPTH, kf, i)
        self.slam_map = slam_map
        self._start_tracking(frame.frame_id, t_init, kf.id, "prior-shape initialization")
        if image is not None and self.config.texture_on_keyframes:
            self._texture(t_init, image)
        logger.info(f"[Tracker] map initialized with {len(slam_map.points)} prior-depth points")
        return slam_map

    def initialize_two_view(self, frame: FrameInput, frame_id: Optional[int] = None, timestamp: float = 0.0) -> FrameResult:
        """Feed frames until a two-view initialization succeeds; NotInitialized until then."""
        if self.state != TrackingState.NOT_INITIALIZED:
            raise PreconditionError("tracker already initialized")
        start = time.perf_counter()
        frame, image = self._acquire(frame, frame_id, timestamp)
        frame = self._in_bounds(frame)
        if self.two_view is None:
            self.two_view = TwoViewInitializer(self.k, min_points=self.config.min_init_points)
        result = self.two_view.try_initialize(frame)
        timing = {"total": 1e3 * (time.perf_counter() - start)}
        if result is None:
            return FrameResult(frame.frame_id, self.state, timing=timing)

        slam_map = SlamMap(self.k)
        kf_ref = slam_map.add_keyframe(self.two_view.reference, result.pose_ref, fixed=True)
        kf_cur = slam_map.add_keyframe(frame, result.pose_cur, image=image)
        for p, i_ref, i_cur in zip(result.points, result.ref_index, result.cur_index):
            point = slam_map.add_point(p, PointOrigin.TRIANGULATED, kf_ref, int(i_ref))
            slam_map.add_observation(point.id, kf_cur, int(i_cur))
        self.slam_map = slam_map
        self._start_tracking(frame.frame_id, result.pose_cur, kf_cur.id, "two-view initialization")
        return FrameResult(frame.frame_id, self.state, result.pose_cur, len(result.points), 1.0, timing, keyframe=True)

    def _start_tracking(self, frame_id: int, pose: Pose, kf_id: int, reason: str) -> None:
        self.last_pose = pose
        self._velocity = None
        self._reference_kf = kf_id
        self._frames_since_keyframe = 0
        self._transition(frame_id, TrackingState.TRACKING, reason)

    # =====================
    # Per-frame tracking
    # =====================

    def _predict(self) -> Pose:
        if self._velocity is None:
            return self.last_pose
        return self._velocity.compose(self.last_pose)

    def _associate(
        self, frame: FrameObservations, predicted: Pose
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Dict[int, int]]:
        """
        (observation indices, point ids, point positions, new feature links) for the
        frame's map matches. Runs under the read lock, so the feature links found by
        descriptor are returned for the caller to apply under the write lock.
        """
        slam_map = self.slam_map
        obs_idx, point_ids = [], []
        links: Dict[int, int] = {}
        linked = set()
        unmatched = []
        for i, fid in enumerate(frame.feature_ids):
            pid = slam_map.feature_index.get(int(fid)) if fid >= 0 else None
            if pid is not None and pid in slam_map.points and pid not in linked:
                obs_idx.append(i)
                point_ids.append(pid)
                linked.add(pid)
            else:
                unmatched.append(i)

        descriptors = frame.descriptors
        if unmatched and descriptors is not None:
            table_ids, table_desc = slam_map.descriptor_table()
            free = np.array([pid not in linked for pid in table_ids], dtype=bool)
            if free.any():
                table_ids, table_desc = table_ids[free], table_desc[free]
                _, positions = slam_map.point_arrays(table_ids)
                projected, in_front = project_points(predicted, self.k, positions)
                query = np.array(unmatched)
                allowed = window_candidates(frame.pixels[query], projected, self.config.match_window_px)
                allowed &= in_front[None, :]
                qi, ti = match_descriptors(descriptors[query], table_desc, allowed=allowed)
                for q, t in zip(qi, ti):
                    obs_idx.append(int(query[q]))
                    point_ids.append(int(table_ids[t]))
                    fid = int(frame.feature_ids[query[q]])
                    if fid >= 0:
                        links[fid] = int(table_ids[t])

        order = np.argsort(obs_idx, kind="stable")
        obs_idx = np.array(obs_idx, dtype=np.int64)[order]
        point_ids = np.array(point_ids, dtype=np.int64)[order]
        _, positions = slam_map.point_arrays(point_ids)
        return obs_idx, point_ids, positions, links

    def process_frame(
        self,
        frame: FrameInput,
        frame_id: Optional[int] = None,
        timestamp: float = 0.0,
    ) -> FrameResult:
        if self.state == TrackingState.NOT_INITIALIZED:
            raise NotInitialized("process_frame called before initialization")
        timing: Dict[str, float] = {}
        start = time.perf_counter()

        if self.worker is not None and self.worker.error is not None:
            err, self.worker.error = self.worker.error, None
            logger.warning(f"[Tracker] mapping worker reported: {err}")

        tick = time.perf_counter()
        mask = self._mask(self.last_pose)
        timing["mask"] = 1e3 * (time.perf_counter() - tick)

        tick = time.perf_counter()
        # relocalization detects over the whole frame
        detect_mask = mask if self.state == TrackingState.TRACKING else None
        frame, image = self._acquire(frame, frame_id, timestamp, detect_mask)
        frame = self._in_bounds(frame)
        timing["features"] = 1e3 * (time.perf_counter() - tick)

        if self.state == TrackingState.LOST:
            tick = time.perf_counter()
            pose = self.relocalize(frame)
            timing["relocalize"] = 1e3 * (time.perf_counter() - tick)
            timing["total"] = 1e3 * (time.perf_counter() - start)
            if pose is None:
                return FrameResult(frame.frame_id, self.state, None, 0, mask.coverage, timing)
            self._velocity = None
            self.last_pose = pose
            self._transition(frame.frame_id, TrackingState.TRACKING, "relocalized")
            return FrameResult(frame.frame_id, self.state, pose, self._last_reloc_inliers, mask.coverage, timing,
                               relocalized=True)

        masked = filter_by_mask(frame, mask)
        predicted = self._predict()

        tick = time.perf_counter()
        with self.slam_map.lock.read():
            obs_idx, point_ids, positions, links = self._associate(masked, predicted)
        if links:
            with self.slam_map.lock.write():
                self.slam_map.link_features(links)
        timing["associate"] = 1e3 * (time.perf_counter() - tick)

        tick = time.perf_counter()
        pose, inliers = None, np.zeros(len(obs_idx), dtype=bool)
        try:
            observations = list(zip(range(len(obs_idx)), masked.pixels[obs_idx]))
            pose, inliers = optimize_pose(positions, observations, predicted, self.k, self.optimizer_config)
        except (TooFewObservations, Diverged) as e:
            logger.debug(f"[Tracker] frame {frame.frame_id}: pose optimization failed: {e}")
        timing["pose"] = 1e3 * (time.perf_counter() - tick)
        n_inliers = int(inliers.sum())

        if pose is None or n_inliers < self.config.min_inliers:
            self._transition(frame.frame_id, TrackingState.LOST, f"{n_inliers} inliers")
            timing["total"] = 1e3 * (time.perf_counter() - start)
            return FrameResult(frame.frame_id, self.state, None, n_inliers, mask.coverage, timing)

        self._velocity = pose.compose(self.last_pose.inverse())
        self.last_pose = pose
        self._frames_since_keyframe += 1

        tick = time.perf_counter()
        inserted = False
        if self._need_keyframe(n_inliers):
            self._insert_keyframe(masked, pose, obs_idx[inliers], point_ids[inliers], image)
            inserted = True
        elif image is not None and self.config.texture_every_frame:
            self._texture(pose, image)
        timing["mapping"] = 1e3 * (time.perf_counter() - tick)
        timing["total"] = 1e3 * (time.perf_counter() - start)
        logger.debug(f"[Tracker] frame {frame.frame_id}: {n_inliers}/{len(obs_idx)} inliers")
        return FrameResult(frame.frame_id, self.state, pose, n_inliers, mask.coverage, timing, keyframe=inserted)

    def _need_keyframe(self, n_inliers: int) -> bool:
        if self._frames_since_keyframe >= self.config.max_frames_between_keyframes:
            return True
        with self.slam_map.lock.read():
            ref = self.slam_map.keyframes.get(self._reference_kf)
            ref_count = len(ref.observed_point_ids()) if ref is not None else 0
        return ref_count > 0 and n_inliers < self.config.keyframe_inlier_ratio * ref_count

    # =====================
    # Mapping
    # =====================

    def _insert_keyframe(
        self,
        frame: FrameObservations,
        pose: Pose,
        obs_idx: np.ndarray,
        point_ids: np.ndarray,
        image: Optional[np.ndarray],
    ) -> None:
        with self.slam_map.lock.write():
            kf = self.slam_map.add_keyframe(frame, pose, image=image)
            for i, pid in zip(obs_idx, point_ids):
                if pid in self.slam_map.points:
                    self.slam_map.add_observation(int(pid), kf, int(i))
        job = _KeyframeJob(kf.id, self._reference_kf, image)
        self._reference_kf = kf.id
        self._frames_since_keyframe = 0
        if self.worker is not None:
            self.worker.submit(job)
        else:
            self._map_keyframe(job)

    def _map_keyframe(self, job: _KeyframeJob) -> None:
        created = self._triangulate(job.keyframe_id, job.reference_id)
        if self.config.run_local_ba:
            try:
                local_bundle_adjust(
                    self.slam_map,
                    job.keyframe_id,
                    self.config.local_window,
                    self._ba_config(),
                    self._shape_surface(),
                    self.config.covisibility_min_shared,
                )
            except (ShapeTrackerError, ValueError) as e:
                logger.warning(f"[Tracker] local BA on keyframe {job.keyframe_id} failed: {e}")
        culled = self._cull()
        logger.debug(f"[Mapping] keyframe {job.keyframe_id}: +{created} points, -{culled} culled")
        if job.image is not None and self.config.texture_on_keyframes:
            kf = self.slam_map.keyframes.get(job.keyframe_id)
            if kf is not None:
                self._texture(kf.pose, job.image)

    def _triangulate(self, kf_id: int, ref_id: Optional[int]) -> int:
        """New points from unmatched observations shared (by feature id) with the reference keyframe."""
        if ref_id is None:
            return 0
        created = 0
        with self.slam_map.lock.write():
            kf = self.slam_map.keyframes.get(kf_id)
            ref = self.slam_map.keyframes.get(ref_id)
            if kf is None or ref is None:
                return 0
            ref_free = {int(f): i for i, f in enumerate(ref.feature_ids) if f >= 0 and ref.point_ids[i] < 0}
            for i, fid in enumerate(kf.feature_ids):
                if fid < 0 or kf.point_ids[i] >= 0 or int(fid) not in ref_free:
                    continue
                if int(fid) in self.slam_map.feature_index:
                    continue
                j = ref_free[int(fid)]
                try:
                    point, _ = triangulate(
                        ref.pose, kf.pose, ref.pixels[j], kf.pixels[i], self.k, self.config.min_parallax_deg
                    )
                except ShapeTrackerError:
                    continue
                err_ref = np.linalg.norm(reprojection_residuals(ref.pose, self.k, point, ref.pixels[j]))
                err_kf = np.linalg.norm(reprojection_residuals(kf.pose, self.k, point, kf.pixels[i]))
                if max(err_ref, err_kf) > self.config.max_triangulation_error_px:
                    continue
                mp = self.slam_map.add_point(point, PointOrigin.TRIANGULATED, ref, j)
                self.slam_map.add_observation(mp.id, kf, i)
                created += 1
        return created

    def _cull(self) -> int:
        """Drop points observed in fewer than 2 of the last keyframes that should see them."""
        window = self.config.cull_window
        with self.slam_map.lock.write():
            recent = sorted(self.slam_map.keyframes)[-window:]
            if len(recent) < window:
                return 0
            ids, positions = self.slam_map.point_arrays()
            if len(ids) == 0:
                return 0
            expected = np.zeros(len(ids), dtype=np.int64)
            seen = np.zeros(len(ids), dtype=np.int64)
            first = np.array([self.slam_map.points[p].first_keyframe for p in ids])
            for kf_id in recent:
                kf = self.slam_map.keyframes[kf_id]
                pixels, in_front = project_points(kf.pose, self.k, positions)
                visible = in_front & self.k.in_bounds(pixels) & (first <= kf_id)
                expected += visible
                observed = np.array([kf_id in self.slam_map.points[p].observations for p in ids])
                seen += observed
            doomed = ids[(expected >= window) & (seen < 2)]
            for pid in doomed:
                self.slam_map.remove_point(int(pid))
        return len(doomed)

    def _texture(self, pose: Pose, image: np.ndarray) -> None:
        if not self.mesh_frame or image is None:
            return
        with self._texture_lock:
            updated = texture_update(self.mesh, pose, image, self.k)
        logger.debug(f"[Tracker] textured {updated} faces")

    # =====================
    # Relocalization
    # =====================

    def relocalize(self, frame: FrameObservations) -> Optional[Pose]:
        """Pose from global id/descriptor matches against the map, or None (stay Lost)."""
        if self.state != TrackingState.LOST:
            raise PreconditionError("relocalize requires the Lost state")
        if not frame.observations:
            return None
        with self.slam_map.lock.read():
            obs_idx, point_ids, positions = self._global_matches(frame)
        if len(obs_idx) < self.config.reloc_min_matches:
            return None

        pixels = frame.pixels[obs_idx]
        corrs = correspondences_from_arrays(positions, pixels)
        seeds = [self.last_pose] if self.last_pose is not None else []
        attempts = []
        if seeds:
            attempts.append(self.registration_config.model_copy(update={"use_rotation_grid": False}))
        attempts.append(self.registration_config)

        for reg_config in attempts:
            try:
                result = solve_initial_registration(corrs, self.k, reg_config, extra_seeds=seeds)
                observations = list(zip(range(len(obs_idx)), pixels))
                pose, _ = optimize_pose(positions, observations, result.pose, self.k, self.optimizer_config)
            except ShapeTrackerError as e:
                logger.debug(f"[Tracker] relocalization attempt failed: {e}")
                continue
            inliers = count_inliers(pose, positions, pixels, self.k, self.config.reloc_inlier_px)
            if inliers.sum() >= self.config.reloc_min_matches:
                self._last_reloc_inliers = int(inliers.sum())
                return pose
        return None

    def _global_matches(self, frame: FrameObservations) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        slam_map = self.slam_map
        obs_idx, point_ids = [], []
        used = set()
        rest = []
        for i, fid in enumerate(frame.feature_ids):
            pid = slam_map.feature_index.get(int(fid)) if fid >= 0 else None
            if pid is not None and pid in slam_map.points and pid not in used:
                obs_idx.append(i)
                point_ids.append(pid)
                used.add(pid)
            else:
                rest.append(i)
        descriptors = frame.descriptors
        if rest and descriptors is not None:
            table_ids, table_desc = slam_map.descriptor_table()
            free = np.array([pid not in used for pid in table_ids], dtype=bool)
            if free.any():
                qi, ti = match_descriptors(descriptors[rest], table_desc[free])
                table_ids = table_ids[free]
                for q, t in zip(qi, ti):
                    obs_idx.append(rest[q])
                    point_ids.append(int(table_ids[t]))
        _, positions = slam_map.point_arrays(point_ids)
        return np.array(obs_idx, dtype=np.int64), np.array(point_ids, dtype=np.int64), positions

    # =====================
    # Global BA and shutdown
    # =====================

    def run_global_ba(self, config: Optional[OptimizerConfig] = None) -> BaResult:
        """Bundle adjustment over every keyframe and map point with exclusive map access."""
        if self.slam_map is None or len(self.slam_map.keyframes) < 2:
            raise PreconditionError("global BA needs at least 2 keyframes")
        if self.worker is not None:
            self.worker.drain()
        config = config or self._ba_config()
        surface = self._shape_surface() if config.w_shape > 0 else None
        with self.slam_map.lock.write():
            problem, pose_ids, point_ids = problem_from_map(
                self.slam_map, sorted(self.slam_map.keyframes), surface, with_shape=surface is not None
            )
            result = bundle_adjust(problem, config)
            write_back(self.slam_map, result, problem, pose_ids, point_ids)
        logger.info(
            f"[GlobalBA] {problem.n_poses} keyframes, {problem.n_points} points, "
            f"cost {result.initial_cost:.6g} -> {result.final_cost:.6g}"
        )
        return result

    def close(self) -> None:
        if self.worker is not None:
            self.worker.drain()
            self.worker.stop()
            self.worker = None

    def __enter__(self) -> "Tracker":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
