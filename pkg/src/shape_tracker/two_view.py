"""
Classic monocular two-view initialization, used when the prior-shape initialization is
switched off. Scale and world frame are arbitrary: the reference camera is the origin
and the median scene depth is one.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .configs.settings import MIN_INIT_POINTS
from .errors import ShapeTrackerError
from .features import FrameObservations
from .geometry import Intrinsics, Pose, triangulate

logger = logging.getLogger(__name__)

MIN_INIT_PARALLAX_DEG = 1.0
RANSAC_THRESHOLD_PX = 1.0


@dataclass
class TwoViewResult:
    pose_ref: Pose
    pose_cur: Pose
    points: np.ndarray
    ref_index: np.ndarray
    cur_index: np.ndarray
    median_parallax_deg: float


class TwoViewInitializer:
    """Essential matrix (RANSAC) + cheirality + parallax gate between a reference and the current frame."""

    def __init__(
        self,
        k: Intrinsics,
        min_parallax_deg: float = MIN_INIT_PARALLAX_DEG,
        min_points: int = MIN_INIT_POINTS,
    ):
        self.k = k
        self.min_parallax_deg = min_parallax_deg
        self.min_points = min_points
        self.reference: Optional[FrameObservations] = None
        self.attempts = 0

    def _matches(self, cur: FrameObservations):
        ref_ids = self.reference.feature_ids
        cur_ids = cur.feature_ids
        common, ref_idx, cur_idx = np.intersect1d(ref_ids[ref_ids >= 0], cur_ids[cur_ids >= 0], return_indices=True)
        ref_pos = np.nonzero(ref_ids >= 0)[0][ref_idx]
        cur_pos = np.nonzero(cur_ids >= 0)[0][cur_idx]
        return ref_pos, cur_pos

    def try_initialize(self, frame: FrameObservations) -> Optional[TwoViewResult]:
        """Feed frames in order; returns a result once a pair passes every gate."""
        if self.reference is None or len(self.reference) < self.min_points:
            self.reference = frame
            return None
        self.attempts += 1
        ref_pos, cur_pos = self._matches(frame)
        if len(ref_pos) < max(8, self.min_points):
            return None

        pts_ref = self.reference.pixels[ref_pos]
        pts_cur = frame.pixels[cur_pos]
        cv2.setRNGSeed(0)
        try:
            e, mask = cv2.findEssentialMat(
                pts_ref, pts_cur, self.k.matrix, method=cv2.RANSAC, prob=0.999, threshold=RANSAC_THRESHOLD_PX
            )
            if e is None or e.shape[0] < 3:
                return None
            _, rotation, t, pose_mask = cv2.recoverPose(e[:3], pts_ref, pts_cur, self.k.matrix, mask=mask.copy())
        except cv2.error as err:
            logger.debug(f"[TwoView] essential matrix failed: {err}")
            return None
        inliers = np.nonzero(pose_mask.reshape(-1) > 0)[0]
        if len(inliers) < self.min_points:
            return None

        pose_ref = Pose.identity()
        pose_cur = Pose.from_rt(rotation, t.reshape(3))
        points, parallaxes, keep = [], [], []
        for i in inliers:
            try:
                p, parallax = triangulate(pose_ref, pose_cur, pts_ref[i], pts_cur[i], self.k, min_parallax_deg=0.0)
            except ShapeTrackerError:
                continue
            points.append(p)
            parallaxes.append(parallax)
            keep.append(i)
        if len(keep) < self.min_points:
            return None
        median_parallax = float(np.median(parallaxes))
        if median_parallax < self.min_parallax_deg:
            logger.debug(f"[TwoView] median parallax {median_parallax:.3f} deg below {self.min_parallax_deg}")
            return None

        points = np.array(points)
        scale = 1.0 / float(np.median(points[:, 2]))
        keep = np.array(keep)
        logger.info(
            f"[TwoView] initialized from frames {self.reference.frame_id}/{frame.frame_id} "
            f"with {len(keep)} points, median parallax {median_parallax:.2f} deg"
        )
        return TwoViewResult(
            pose_ref=pose_ref,
            pose_cur=Pose(pose_cur.quaternion, pose_cur.translation * scale),
            points=points * scale,
            ref_index=ref_pos[keep],
            cur_index=cur_pos[keep],
            median_parallax_deg=median_parallax,
        )
