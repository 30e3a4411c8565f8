"""
2D feature observations: FAST-9 corners, pyramidal patch tracking, pseudo-mask
filtering and 256-bit intensity-comparison descriptors for relocalization.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.ndimage import maximum_filter

from .configs.settings import (
    DESCRIPTOR_BITS,
    DESCRIPTOR_SEED,
    DETECTION_GRID,
    FAST_THRESHOLD,
    MAX_FEATURES,
    PATCH_SIZE,
    PYRAMID_LEVELS,
    TRACK_MAX_SSD,
)
from .prior_shape import BinaryMask

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8
MAX_HAMMING = 64
MIN_NEW_FEATURE_DISTANCE = 5.0

# Bresenham circle of radius 3, clockwise from the top, as (dx, dy)
_CIRCLE = np.array(
    [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
     (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)]
)
_ARC = 9


class FrameSource(str, Enum):
    DETECTOR = "detector"
    SIMULATOR = "simulator"


@dataclass(frozen=True, eq=False)
class Observation:
    frame_id: int
    pixel: np.ndarray
    feature_id: Optional[int] = None
    descriptor: Optional[np.ndarray] = None


@dataclass(eq=False)
class FrameObservations:
    frame_id: int
    timestamp: float
    observations: List[Observation] = field(default_factory=list)
    source: FrameSource = FrameSource.SIMULATOR

    def __post_init__(self) -> None:
        ids = [o.feature_id for o in self.observations if o.feature_id is not None]
        if len(ids) != len(set(ids)):
            raise ValueError(f"frame {self.frame_id}: duplicate feature ids")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def pixels(self) -> np.ndarray:
        return np.array([o.pixel for o in self.observations], dtype=float).reshape(-1, 2)

    @property
    def feature_ids(self) -> np.ndarray:
        """Persistent ids, -1 where absent."""
        return np.array(
            [-1 if o.feature_id is None else o.feature_id for o in self.observations], dtype=np.int64
        )

    @property
    def descriptors(self) -> Optional[np.ndarray]:
        """(N, 32) bytes, or None unless every observation carries one."""
        if not self.observations or any(o.descriptor is None for o in self.observations):
            return None
        return np.stack([o.descriptor for o in self.observations])

    def subset(self, keep: np.ndarray) -> "FrameObservations":
        keep = np.asarray(keep, dtype=bool)
        return replace(self, observations=[o for o, k in zip(self.observations, keep) if k])


def to_gray(image: np.ndarray) -> np.ndarray:
    """RGB to luma (0.299, 0.587, 0.114); grayscale passes through as float."""
    image = np.asarray(image)
    if image.ndim == 3:
        return image[..., :3].astype(np.float64) @ LUMA
    return image.astype(np.float64)


# =====================
# Detection
# =====================

def _contiguous(flags: np.ndarray) -> np.ndarray:
    """True where at least _ARC consecutive ring flags (circularly) are set."""
    wrapped = np.concatenate([flags, flags[: _ARC - 1]], axis=0)
    out = np.zeros(flags.shape[1:], dtype=bool)
    for start in range(len(_CIRCLE)):
        out |= np.logical_and.reduce(wrapped[start:start + _ARC], axis=0)
    return out


def fast_scores(image: np.ndarray, threshold: float) -> np.ndarray:
    """
    Segment-test score per pixel, zero for non-corners. The score is the summed
    exceedance of the ring pixels beyond center +/- threshold on the winning side.
    """
    img = to_gray(image)
    h, w = img.shape
    if h < 7 or w < 7:
        raise ValueError("image must be at least 7x7")
    c = img[3:h - 3, 3:w - 3]
    ring = np.stack([img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in _CIRCLE])
    bright = ring > c + threshold
    dark = ring < c - threshold
    score_bright = np.where(bright, ring - c - threshold, 0.0).sum(axis=0)
    score_dark = np.where(dark, c - threshold - ring, 0.0).sum(axis=0)
    score = np.where(_contiguous(bright), score_bright, 0.0)
    score = np.maximum(score, np.where(_contiguous(dark), score_dark, 0.0))
    full = np.zeros((h, w))
    full[3:h - 3, 3:w - 3] = score
    return full


def detect_corners(
    image: np.ndarray,
    max_count: int = MAX_FEATURES,
    threshold: float = FAST_THRESHOLD,
    grid: Optional[Tuple[int, int]] = None,
    mask: Optional[BinaryMask] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    FAST-9 corners with 3x3 non-maximum suppression.

    With `mask`, scores outside the set bits are zeroed before suppression, so the
    per-cell quota is spread over the cells the mask touches.

    Returns (pixels (N, 2) as (u, v), scores (N,)), strongest first, ties in row-major
    order. With `grid=(rows, cols)` each cell keeps at most ceil(max_count / cells)
    corners before the global cut.
    """
    scores = fast_scores(image, threshold)
    if mask is not None:
        if mask.bits.shape != scores.shape:
            raise ValueError("mask and image sizes differ")
        scores = np.where(mask.bits, scores, 0.0)
    keep = (scores > 0) & (scores == maximum_filter(scores, size=3, mode="constant", cval=0.0))
    rows, cols = np.nonzero(keep)
    s = scores[rows, cols]

    if grid is not None and len(s):
        gy, gx = grid
        h, w = scores.shape
        cell = (rows * gy // h) * gx + cols * gx // w
        order = np.lexsort((cols, rows, -s, cell))
        cell_sorted = cell[order]
        first = np.searchsorted(cell_sorted, cell_sorted, side="left")
        rank = np.arange(len(order)) - first
        n_cells = gy * gx
        if mask is not None:
            mr, mc = np.nonzero(mask.bits)
            n_cells = max(1, len(np.unique((mr * gy // h) * gx + mc * gx // w)))
        quota = int(np.ceil(max_count / float(n_cells)))
        chosen = order[rank < quota]
        rows, cols, s = rows[chosen], cols[chosen], s[chosen]

    order = np.lexsort((cols, rows, -s))[:max_count]
    pixels = np.stack([cols[order], rows[order]], axis=1).astype(float)
    return pixels, s[order]


# =====================
# Tracking
# =====================

def _as_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(to_gray(image)), 0, 255).astype(np.uint8)


def _window_inside(pixels: np.ndarray, width: int, height: int, half: int) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return (
            (pixels[:, 0] >= half) & (pixels[:, 0] <= width - 1 - half)
            & (pixels[:, 1] >= half) & (pixels[:, 1] <= height - 1 - half)
        )


def track_features(
    prev_image: np.ndarray,
    next_image: np.ndarray,
    prev_pixels: np.ndarray,
    patch_size: int = PATCH_SIZE,
    levels: int = PYRAMID_LEVELS,
    max_ssd: float = TRACK_MAX_SSD,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pyramidal translational patch alignment. Returns (pixels (N, 2), tracked flags);
    lost points have NaN pixels. A point is lost when its window leaves either image
    or the final mean squared patch difference exceeds `max_ssd`.
    """
    prev_u8, next_u8 = _as_u8(prev_image), _as_u8(next_image)
    if prev_u8.shape != next_u8.shape:
        raise ValueError("images must have the same size")
    prev_pixels = np.asarray(prev_pixels, dtype=float).reshape(-1, 2)
    n = len(prev_pixels)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)

    h, w = prev_u8.shape
    half = patch_size // 2
    p0 = prev_pixels.astype(np.float32).reshape(-1, 1, 2)
    lk_params = dict(
        winSize=(patch_size, patch_size),
        maxLevel=levels - 1,
        criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01),
    )
    p1, status, _ = cv2.calcOpticalFlowPyrLK(prev_u8, next_u8, p0, None, **lk_params)
    moved = prev_pixels + (p1.reshape(-1, 2).astype(np.float64) - p0.reshape(-1, 2).astype(np.float64))

    ok = status.reshape(-1).astype(bool)
    ok &= _window_inside(prev_pixels, w, h, half) & _window_inside(moved, w, h, half)
    prev_f, next_f = prev_u8.astype(np.float32), next_u8.astype(np.float32)
    for i in np.nonzero(ok)[0]:
        a = cv2.getRectSubPix(prev_f, (patch_size, patch_size), tuple(map(float, prev_pixels[i])))
        b = cv2.getRectSubPix(next_f, (patch_size, patch_size), tuple(map(float, moved[i])))
        if float(np.mean((a - b) ** 2)) > max_ssd:
            ok[i] = False

    moved[~ok] = np.nan
    return moved, ok


def filter_by_mask(frame: FrameObservations, mask: BinaryMask) -> FrameObservations:
    """Observations whose pixel falls on a set mask bit, order preserved."""
    if not frame.observations:
        return replace(frame, observations=[])
    return frame.subset(mask.contains(frame.pixels))


# =====================
# Descriptors
# =====================

def _comparison_pattern(patch_size: int = PATCH_SIZE) -> np.ndarray:
    half = patch_size // 2
    rng = np.random.default_rng(DESCRIPTOR_SEED)
    return rng.integers(-half, half + 1, size=(DESCRIPTOR_BITS, 4))


_PATTERN = _comparison_pattern()
_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1)


def compute_descriptors(image: np.ndarray, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """256-bit signatures of smoothed intensity comparisons; returns (descriptors, valid)."""
    smooth = cv2.GaussianBlur(to_gray(image).astype(np.float32), (5, 5), 2.0)
    h, w = smooth.shape
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    centre = np.rint(np.nan_to_num(pixels, nan=-1e6)).astype(np.int64)
    valid = _window_inside(centre.astype(float), w, h, PATCH_SIZE // 2)
    desc = np.zeros((len(pixels), DESCRIPTOR_BYTES), dtype=np.uint8)
    if valid.any():
        c = centre[valid]
        a = smooth[c[:, 1, None] + _PATTERN[None, :, 1], c[:, 0, None] + _PATTERN[None, :, 0]]
        b = smooth[c[:, 1, None] + _PATTERN[None, :, 3], c[:, 0, None] + _PATTERN[None, :, 2]]
        desc[valid] = np.packbits(a < b, axis=1)
    return desc, valid


def hamming(query: np.ndarray, train: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances (N, M)."""
    query = np.asarray(query, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    train = np.asarray(train, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    out = np.empty((len(query), len(train)), dtype=np.int64)
    step = max(1, 2_000_000 // max(1, len(train) * DESCRIPTOR_BYTES))
    for start in range(0, len(query), step):
        x = query[start:start + step, None, :] ^ train[None, :, :]
        out[start:start + step] = _POPCOUNT[x].sum(axis=2)
    return out


def match_descriptors(
    query: np.ndarray,
    train: np.ndarray,
    max_distance: int = MAX_HAMMING,
    ratio: float = 0.8,
    allowed: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-to-one Hamming matching with a ratio test. `allowed` (N, M) restricts the
    candidates. Returns (query indices, train indices).
    """
    empty = np.zeros(0, dtype=np.int64)
    if len(query) == 0 or len(train) == 0:
        return empty, empty
    dist = hamming(query, train).astype(float)
    if allowed is not None:
        dist[~allowed] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")
    rows = np.arange(len(dist))
    best = dist[rows, order[:, 0]]
    second = dist[rows, order[:, 1]] if dist.shape[1] > 1 else np.full(len(dist), np.inf)
    good = (best <= max_distance) & ((second == np.inf) | (best < ratio * second))

    q_idx = np.nonzero(good)[0]
    t_idx = order[q_idx, 0]
    by_distance = np.lexsort((q_idx, best[q_idx]))
    _, first = np.unique(t_idx[by_distance], return_index=True)
    chosen = np.sort(by_distance[first])
    return q_idx[chosen], t_idx[chosen]


def window_candidates(query_pixels: np.ndarray, predicted: np.ndarray, window_px: float) -> np.ndarray:
    """(N, M) mask: query pixel inside the square window centred on each predicted pixel."""
    half = window_px / 2.0
    with np.errstate(invalid="ignore"):
        d = np.abs(np.asarray(query_pixels)[:, None, :] - np.asarray(predicted)[None, :, :])
        return np.all(d <= half, axis=2)


# =====================
# Image front end
# =====================

class ImageFrontend:
    """
    Turns an image sequence into FrameObservations: points are chained through
    `track_features` (keeping their ids) and topped up with new grid-bucketed corners.
    """

    def __init__(
        self,
        max_features: int = MAX_FEATURES,
        threshold: float = FAST_THRESHOLD,
        grid: Tuple[int, int] = DETECTION_GRID,
    ):
        self.max_features = max_features
        self.threshold = threshold
        self.grid = grid
        self._prev: Optional[np.ndarray] = None
        self._pixels = np.zeros((0, 2))
        self._ids = np.zeros(0, dtype=np.int64)
        self._next_id = 0

    def reset(self) -> None:
        self._prev = None
        self._pixels = np.zeros((0, 2))
        self._ids = np.zeros(0, dtype=np.int64)

    def process(
        self,
        image: np.ndarray,
        frame_id: int,
        timestamp: float = 0.0,
        mask: Optional[BinaryMask] = None,
    ) -> FrameObservations:
        """New corners are only detected inside `mask` when given; tracked points are kept."""
        gray = to_gray(image)
        pixels, ids = np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
        if self._prev is not None and len(self._pixels):
            moved, ok = track_features(self._prev, gray, self._pixels)
            pixels, ids = moved[ok], self._ids[ok]

        room = self.max_features - len(pixels)
        if room > 0:
            corners, _ = detect_corners(gray, self.max_features, self.threshold, self.grid, mask)
            if len(pixels) and len(corners):
                d = np.abs(corners[:, None, :] - pixels[None, :, :]).max(axis=2).min(axis=1)
                corners = corners[d >= MIN_NEW_FEATURE_DISTANCE]
            corners = corners[:room]
            new_ids = np.arange(self._next_id, self._next_id + len(corners), dtype=np.int64)
            self._next_id += len(corners)
            pixels = np.concatenate([pixels, corners])
            ids = np.concatenate([ids, new_ids])

        desc, valid = compute_descriptors(gray, pixels)
        pixels, ids, desc = pixels[valid], ids[valid], desc[valid]
        self._prev, self._pixels, self._ids = gray, pixels, ids
        logger.debug(f"[Frontend] frame {frame_id}: {len(pixels)} features")
        return FrameObservations(
            frame_id=frame_id,
            timestamp=timestamp,
            observations=[
                Observation(frame_id, p.copy(), int(i), d) for p, i, d in zip(pixels, ids, desc)
            ],
            source=FrameSource.DETECTOR,
        )


def observations_from_arrays(
    frame_id: int,
    timestamp: float,
    pixels: np.ndarray,
    feature_ids: Sequence[int],
    source: FrameSource = FrameSource.SIMULATOR,
    descriptors: Optional[np.ndarray] = None,
) -> FrameObservations:
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    return FrameObservations(
        frame_id=frame_id,
        timestamp=timestamp,
        observations=[
            Observation(
                frame_id, pixels[i].copy(), int(feature_ids[i]),
                None if descriptors is None else descriptors[i],
            )
            for i in range(len(pixels))
        ],
        source=source,
    )
