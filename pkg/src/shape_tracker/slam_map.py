"""
Map state shared by tracking and mapping: keyframes, map points and the observation
graph between them. Positions are always expressed in the mesh frame.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .features import FrameObservations
from .geometry import Intrinsics, Pose
from .utils.rwlock import ReadWriteLock

logger = logging.getLogger(__name__)


class PointOrigin(str, Enum):
    PRIOR_DEPTH = "prior_depth"
    TRIANGULATED = "triangulated"


@dataclass(eq=False)
class MapPoint:
    id: int
    position: np.ndarray
    origin: PointOrigin
    observations: Dict[int, int] = field(default_factory=dict)  # keyframe id -> observation index
    descriptor: Optional[np.ndarray] = None
    feature_id: Optional[int] = None
    first_keyframe: int = -1


@dataclass(eq=False)
class Keyframe:
    id: int
    frame_id: int
    pose: Pose
    pixels: np.ndarray
    feature_ids: np.ndarray
    descriptors: Optional[np.ndarray] = None
    point_ids: np.ndarray = field(default=None)
    fixed: bool = False
    image: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.point_ids is None:
            self.point_ids = np.full(len(self.pixels), -1, dtype=np.int64)

    def observed_point_ids(self) -> List[int]:
        return [int(p) for p in self.point_ids if p >= 0]


class SlamMap:
    """Keyframes and map points guarded by one reader-writer lock."""

    def __init__(self, k: Intrinsics):
        self.k = k
        self.keyframes: Dict[int, Keyframe] = {}
        self.points: Dict[int, MapPoint] = {}
        self.feature_index: Dict[int, int] = {}  # persistent feature id -> point id
        self.lock = ReadWriteLock()
        self._next_kf = 1
        self._next_point = 0

    def __repr__(self) -> str:
        return f"SlamMap(keyframes={len(self.keyframes)}, points={len(self.points)})"

    @property
    def first_keyframe_id(self) -> Optional[int]:
        return min(self.keyframes) if self.keyframes else None

    @property
    def last_keyframe_id(self) -> Optional[int]:
        return max(self.keyframes) if self.keyframes else None

    def add_keyframe(
        self,
        frame: FrameObservations,
        pose: Pose,
        fixed: bool = False,
        image: Optional[np.ndarray] = None,
    ) -> Keyframe:
        kf = Keyframe(
            id=self._next_kf,
            frame_id=frame.frame_id,
            pose=pose,
            pixels=frame.pixels,
            feature_ids=frame.feature_ids,
            descriptors=frame.descriptors,
            fixed=fixed,
            image=image,
        )
        self._next_kf += 1
        self.keyframes[kf.id] = kf
        return kf

    def add_point(
        self,
        position: np.ndarray,
        origin: PointOrigin,
        keyframe: Keyframe,
        obs_index: int,
    ) -> MapPoint:
        fid = int(keyframe.feature_ids[obs_index])
        point = MapPoint(
            id=self._next_point,
            position=np.asarray(position, dtype=float).copy(),
            origin=origin,
            descriptor=None if keyframe.descriptors is None else keyframe.descriptors[obs_index],
            feature_id=fid if fid >= 0 else None,
            first_keyframe=keyframe.id,
        )
        self._next_point += 1
        self.points[point.id] = point
        self.add_observation(point.id, keyframe, obs_index)
        if point.feature_id is not None:
            self.feature_index[point.feature_id] = point.id
        return point

    def add_observation(self, point_id: int, keyframe: Keyframe, obs_index: int) -> None:
        point = self.points[point_id]
        previous = keyframe.point_ids[obs_index]
        if previous >= 0 and previous != point_id and previous in self.points:
            self.points[previous].observations.pop(keyframe.id, None)
        point.observations[keyframe.id] = obs_index
        keyframe.point_ids[obs_index] = point_id
        fid = int(keyframe.feature_ids[obs_index])
        if fid >= 0:
            self.feature_index.setdefault(fid, point_id)

    def remove_point(self, point_id: int) -> None:
        point = self.points.pop(point_id, None)
        if point is None:
            return
        for kf_id, obs_index in point.observations.items():
            kf = self.keyframes.get(kf_id)
            if kf is not None and kf.point_ids[obs_index] == point_id:
                kf.point_ids[obs_index] = -1
        for fid in [f for f, p in self.feature_index.items() if p == point_id]:
            del self.feature_index[fid]

    def link_features(self, links: Dict[int, int]) -> int:
        """Point persistent feature ids at existing points; links to removed points are dropped."""
        applied = 0
        for fid, pid in links.items():
            if pid in self.points:
                self.feature_index[int(fid)] = int(pid)
                applied += 1
        return applied

    def rescale(self, factor: float, center: np.ndarray) -> None:
        """
        Similarity about `center`: points and camera centres move to
        center + factor * (x - center). Rotations are kept, so every reprojection is unchanged.
        """
        center = np.asarray(center, dtype=float)
        for point in self.points.values():
            point.position = center + factor * (point.position - center)
        for kf in self.keyframes.values():
            eye = center + factor * (kf.pose.camera_center() - center)
            kf.pose = Pose(kf.pose.quaternion, -kf.pose.rotation @ eye)

    def covisibility(self, kf_id: int) -> Counter:
        """Shared map-point counts between `kf_id` and every other keyframe."""
        counts: Counter = Counter()
        for pid in self.keyframes[kf_id].observed_point_ids():
            point = self.points.get(pid)
            if point is None:
                continue
            for other in point.observations:
                if other != kf_id:
                    counts[other] += 1
        return counts

    def covisible_keyframes(self, kf_id: int, min_shared: int) -> List[Tuple[int, int]]:
        """(keyframe id, shared count) with >= min_shared, strongest first then by id."""
        counts = self.covisibility(kf_id)
        return sorted(((k, c) for k, c in counts.items() if c >= min_shared), key=lambda kc: (-kc[1], kc[0]))

    def point_arrays(self, ids: Optional[Iterable[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
        """(point ids, positions) for `ids` or all points, in ascending id order."""
        ids = sorted(self.points) if ids is None else list(ids)
        positions = np.array([self.points[i].position for i in ids], dtype=float).reshape(-1, 3)
        return np.array(ids, dtype=np.int64), positions

    def descriptor_table(self) -> Tuple[np.ndarray, np.ndarray]:
        """(point ids, descriptors) of points that carry a descriptor."""
        ids = [pid for pid in sorted(self.points) if self.points[pid].descriptor is not None]
        if not ids:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 32), dtype=np.uint8)
        return np.array(ids, dtype=np.int64), np.stack([self.points[i].descriptor for i in ids])

    def keyframe_poses(self) -> Dict[int, Pose]:
        return {kf_id: kf.pose for kf_id, kf in self.keyframes.items()}
