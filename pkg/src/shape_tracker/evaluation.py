"""
Run metrics: 2D target registration error, trajectory RMSE in the organ frame, lost
frame fractions, map scale error and per-stage timing, plus the report model and plot.
"""
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel, Field, model_validator  # noqa: E402

from .configs.settings import TRE_SAMPLE_FRAMES  # noqa: E402
from .errors import EmptyOverlap, MarkerNotVisible  # noqa: E402
from .geometry import Intrinsics, Pose, project_points  # noqa: E402

logger = logging.getLogger(__name__)

PoseTrack = Union[Mapping[int, Optional[Pose]], Sequence[Optional[Pose]]]


# =====================
# Metrics
# =====================

def compute_tre(
    markers: np.ndarray,
    est_pose: Pose,
    gt_pose: Pose,
    k: Intrinsics,
    k_est: Optional[Intrinsics] = None,
) -> float:
    """Mean pixel distance between marker projections under the estimated and true poses."""
    markers = np.atleast_2d(np.asarray(markers, dtype=float))
    gt_px, gt_front = project_points(gt_pose, k, markers)
    if not np.all(gt_front & k.in_bounds(np.nan_to_num(gt_px, nan=-1.0))):
        raise MarkerNotVisible("markers must be visible under the ground-truth pose")
    est_px, est_front = project_points(est_pose, k_est or k, markers)
    if not est_front.all():
        raise MarkerNotVisible("markers behind the estimated camera")
    return float(np.mean(np.linalg.norm(est_px - gt_px, axis=1)))


def _as_dict(track: PoseTrack) -> Dict[int, Optional[Pose]]:
    if isinstance(track, Mapping):
        return dict(track)
    return dict(enumerate(track))


def relative_errors(est: PoseTrack, gt: PoseTrack) -> pd.DataFrame:
    """
    Per-frame error of gt_i^-1 o est_i for frames present in both tracks. Frames whose
    estimate is None (lost) are kept with NaN errors.
    """
    est, gt = _as_dict(est), _as_dict(gt)
    rows = []
    for frame_id in sorted(set(est) & set(gt)):
        e, g = est[frame_id], gt[frame_id]
        if g is None:
            continue
        if e is None:
            rows.append({"frame_id": frame_id, "trans_err": np.nan, "rot_err": np.nan, "lost": True})
            continue
        rel = g.inverse().compose(e)
        rows.append({
            "frame_id": frame_id,
            "trans_err": float(np.linalg.norm(rel.translation)),
            "rot_err": float(np.linalg.norm(rel.rotvec)),
            "lost": False,
        })
    return pd.DataFrame(rows, columns=["frame_id", "trans_err", "rot_err", "lost"])


def compute_traj_error(est: PoseTrack, gt: PoseTrack) -> Tuple[float, float]:
    """(translation RMSE, rotation RMSE in radians) over frames tracked in `est`."""
    errors = relative_errors(est, gt)
    tracked = errors[~errors["lost"].astype(bool)]
    if tracked.empty:
        raise EmptyOverlap("no frame has both an estimate and ground truth")
    excluded = int(errors["lost"].sum())
    if excluded:
        logger.debug(f"[Evaluation] {excluded} lost frames excluded from trajectory error")
    trans = math.sqrt(float(np.mean(tracked["trans_err"].to_numpy() ** 2)))
    rot = math.sqrt(float(np.mean(tracked["rot_err"].to_numpy() ** 2)))
    return trans, rot


def compute_scale_error(points: np.ndarray, true_points: np.ndarray, center: np.ndarray) -> float:
    """Signed relative error of the RMS distance to `center` (0.01 = 1% too large)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    true_points = np.atleast_2d(np.asarray(true_points, dtype=float))
    if len(points) == 0 or len(true_points) == 0:
        raise EmptyOverlap("scale error needs at least one point")
    s_est = np.sqrt(np.mean(np.sum((points - center) ** 2, axis=1)))
    s_true = np.sqrt(np.mean(np.sum((true_points - center) ** 2, axis=1)))
    return float(s_est / s_true - 1.0)


def lost_fractions(sequences: Sequence[Sequence[bool]]) -> Tuple[float, List[float]]:
    """(pooled over all frames, per sequence) fraction of lost frames."""
    per_sequence = [float(np.mean(s)) if len(s) else 0.0 for s in sequences]
    total = sum(len(s) for s in sequences)
    pooled = float(sum(int(np.sum(s)) for s in sequences) / total) if total else 0.0
    return pooled, per_sequence


def sample_tre_frames(tracked_frames: Sequence[int], count: int = TRE_SAMPLE_FRAMES, seed: int = 0) -> List[int]:
    """Uniform sample (without replacement) among frames where tracking was maintained."""
    tracked = np.asarray(sorted(tracked_frames), dtype=np.int64)
    if len(tracked) <= count:
        return tracked.tolist()
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(tracked, size=count, replace=False).tolist())


def timing_percentiles(timings: Sequence[Mapping[str, float]]) -> Dict[str, Dict[str, float]]:
    """Per-stage p50/p90/p99/mean in milliseconds."""
    df = pd.DataFrame(list(timings))
    if df.empty:
        return {}
    out = {}
    for stage in sorted(df.columns):
        values = df[stage].dropna()
        if values.empty:
            continue
        q = values.quantile([0.5, 0.9, 0.99])
        out[stage] = {
            "p50": float(q.loc[0.5]),
            "p90": float(q.loc[0.9]),
            "p99": float(q.loc[0.99]),
            "mean": float(values.mean()),
        }
    return out


# =====================
# Report
# =====================

class TreSummary(BaseModel):
    mean: float
    median: float
    max: float
    frames: List[int] = Field(default_factory=list)

    @classmethod
    def from_values(cls, values: Sequence[float], frames: Sequence[int]) -> "TreSummary":
        v = np.asarray(values, dtype=float)
        return cls(mean=float(v.mean()), median=float(np.median(v)), max=float(v.max()), frames=list(frames))


class Metrics(BaseModel):
    tre_px: Optional[TreSummary] = None
    trans_rmse: Optional[float] = None
    rot_rmse_deg: Optional[float] = None
    lost_fraction: float = Field(ge=0.0, le=1.0)
    lost_fraction_per_sequence: List[float] = Field(default_factory=list)
    lost_frames: int = 0
    total_frames: int = 0
    init_success: bool = True
    scale_error: Optional[float] = None
    keyframes: int = 0
    map_points: int = 0
    relocalizations: int = 0

    @model_validator(mode="after")
    def _finite(self) -> "Metrics":
        for name in ("trans_rmse", "rot_rmse_deg", "scale_error"):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise ValueError(f"{name} is not finite")
        return self


class Timing(BaseModel):
    fps: float = 0.0
    wall_s: float = 0.0
    stages: Dict[str, Dict[str, float]] = Field(default_factory=dict)


class MetricsReport(BaseModel):
    config_hash: str
    metrics: Metrics
    timing: Timing = Timing()
    toggles: Dict[str, bool] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    def deterministic_json(self) -> str:
        """Report JSON without the timing section."""
        return self.model_dump_json(indent=2, exclude={"timing"})


# =====================
# Plot
# =====================

def plot_trajectory_errors(errors: pd.DataFrame, path: Union[str, Path], title: str = "") -> Path:
    """Per-frame translation / rotation error with lost frames shaded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_t, ax_r) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    frames = errors["frame_id"].to_numpy()
    lost = errors["lost"].to_numpy(dtype=bool)

    ax_t.plot(frames, errors["trans_err"].to_numpy(), lw=1.0, color="tab:blue")
    ax_t.set_ylabel("translation error")
    ax_r.plot(frames, np.degrees(errors["rot_err"].to_numpy()), lw=1.0, color="tab:orange")
    ax_r.set_ylabel("rotation error [deg]")
    ax_r.set_xlabel("frame")
    for ax in (ax_t, ax_r):
        ax.grid(alpha=0.3)
        if lost.any():
            ax.fill_between(frames, 0, 1, where=lost, transform=ax.get_xaxis_transform(),
                            color="tab:red", alpha=0.15, step="mid", label="lost")
    if title:
        ax_t.set_title(title)
    if lost.any():
        ax_t.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"[Evaluation] Saved trajectory plot to {path}")
    return path
