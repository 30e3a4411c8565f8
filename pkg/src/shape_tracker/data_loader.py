"""
Readers and writers for the on-disk formats: correspondence CSV, T_init text file,
observation logs, ground-truth sidecars, trajectory CSVs and numbered image directories.
"""
import io
import logging
import tempfile
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd

from .configs.settings import ALLOWED_UPLOAD_EXTENSIONS, MAX_UPLOAD_SIZE
from .errors import InputFormatError
from .features import FrameObservations, FrameSource, observations_from_arrays, to_gray
from .geometry import Intrinsics, Pose
from .utils.validation import sanitize_filename, validate_file_upload

logger = logging.getLogger(__name__)

PathOrBytes = Union[str, Path, bytes]

POSE_COLUMNS = ["r00", "r01", "r02", "t0", "r10", "r11", "r12", "t1", "r20", "r21", "r22", "t2"]
TRAJECTORY_COLUMNS = ["frame_id", "state"] + POSE_COLUMNS + ["inlier_count", "ms"]
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
FLOAT_FORMAT = "%.17g"


def _source(data: PathOrBytes):
    return io.BytesIO(data) if isinstance(data, bytes) else data


def _require(df: pd.DataFrame, columns: Sequence[str], what: str) -> None:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise InputFormatError(f"{what}: missing columns {missing}")


# =====================
# Correspondences and T_init
# =====================

def read_correspondences(data: PathOrBytes) -> Tuple[np.ndarray, np.ndarray]:
    """(points (N, 3), pixels (N, 2)) from a CSV with columns x, y, z, u, v."""
    try:
        df = pd.read_csv(_source(data))
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputFormatError(f"cannot read correspondences: {e}")
    df.columns = [c.strip().lower() for c in df.columns]
    _require(df, ["x", "y", "z", "u", "v"], "correspondence CSV")
    values = df[["x", "y", "z", "u", "v"]].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise InputFormatError("correspondence CSV contains non-numeric values")
    return values[:, :3], values[:, 3:]


def write_correspondences(path: Union[str, Path], points: np.ndarray, pixels: np.ndarray) -> Path:
    path = Path(path)
    df = pd.DataFrame(np.hstack([np.asarray(points), np.asarray(pixels)]), columns=["x", "y", "z", "u", "v"])
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_pose_file(data: PathOrBytes) -> Pose:
    """Pose from 12 whitespace-separated numbers, row-major 3x4 [R | t]."""
    text = data.decode("utf-8") if isinstance(data, bytes) else Path(data).read_text(encoding="utf-8")
    try:
        values = np.array([float(tok) for tok in text.split()], dtype=float)
    except ValueError as e:
        raise InputFormatError(f"pose file: {e}")
    if values.size != 12:
        raise InputFormatError(f"pose file needs 12 numbers, got {values.size}")
    return Pose.from_matrix34(values.reshape(3, 4))


def write_pose_file(path: Union[str, Path], pose: Pose) -> Path:
    path = Path(path)
    rows = [" ".join(f"{v:.17g}" for v in row) for row in pose.matrix34()]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


# =====================
# Observation logs
# =====================

def write_observation_log(
    path: Union[str, Path], frames: Iterable[FrameObservations], k: Intrinsics, n_frames: int
) -> Path:
    """Header with intrinsics and frame count, then one `frame_id,feature_id,u,v` record per observation."""
    path = Path(path)
    rows = [
        (f.frame_id, -1 if o.feature_id is None else o.feature_id, o.pixel[0], o.pixel[1])
        for f in frames for o in f.observations
    ]
    df = pd.DataFrame(rows, columns=["frame_id", "feature_id", "u", "v"])
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"# intrinsics {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")
        fh.write(f"# frames {n_frames}\n")
        df.to_csv(fh, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"[DataLoader] Wrote {len(df)} observations to {path}")
    return path


def read_observation_log(path: Union[str, Path], frame_rate: float = 30.0) -> Tuple[Intrinsics, List[FrameObservations]]:
    path = Path(path)
    k, n_frames = None, None
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            tokens = line[1:].split()
            if tokens and tokens[0] == "intrinsics" and len(tokens) == 7:
                fx, fy, cx, cy = (float(t) for t in tokens[1:5])
                k = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(tokens[5]), height=int(tokens[6]))
            elif tokens and tokens[0] == "frames" and len(tokens) == 2:
                n_frames = int(tokens[1])
    if k is None or n_frames is None:
        raise InputFormatError(f"{path.name}: missing intrinsics / frames header")

    df = pd.read_csv(path, comment="#")
    _require(df, ["frame_id", "feature_id", "u", "v"], "observation log")
    groups = {int(fid): g for fid, g in df.groupby("frame_id", sort=True)}
    frames = []
    for frame_id in range(n_frames):
        g = groups.get(frame_id)
        if g is None:
            frames.append(FrameObservations(frame_id, frame_id / frame_rate, [], FrameSource.SIMULATOR))
            continue
        frames.append(observations_from_arrays(
            frame_id, frame_id / frame_rate, g[["u", "v"]].to_numpy(float), g["feature_id"].to_numpy(np.int64)
        ))
    return k, frames


# =====================
# Ground truth and trajectories
# =====================

def _pose_row(pose: Optional[Pose], prefix: str = "") -> Dict[str, float]:
    values = np.full(12, np.nan) if pose is None else pose.matrix34().ravel()
    return {f"{prefix}{c}": float(v) for c, v in zip(POSE_COLUMNS, values)}


def _row_pose(row: pd.Series, prefix: str = "") -> Optional[Pose]:
    values = row[[f"{prefix}{c}" for c in POSE_COLUMNS]].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        return None
    return Pose.from_matrix34(values.reshape(3, 4))


def write_ground_truth(path: Union[str, Path], gt) -> Path:
    """Per-frame organ->camera, lab->camera and organ->lab poses plus marker projections."""
    rows = []
    for i in range(gt.n_frames):
        row = {"frame_id": i, "time": float(gt.frame_times[i])}
        row.update(_pose_row(gt.relative_poses[i], "rel_"))
        row.update(_pose_row(gt.camera_poses[i], "cam_"))
        row.update(_pose_row(gt.organ_poses[i], "organ_"))
        for j, (u, v) in enumerate(gt.marker_pixels(i)):
            row[f"marker{j}_u"], row[f"marker{j}_v"] = float(u), float(v)
        rows.append(row)
    path = Path(path)
    pd.DataFrame(rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_ground_truth_poses(path: Union[str, Path]) -> Dict[int, Pose]:
    df = pd.read_csv(path)
    _require(df, ["frame_id"] + [f"rel_{c}" for c in POSE_COLUMNS], "ground-truth CSV")
    return {int(row["frame_id"]): _row_pose(row, "rel_") for _, row in df.iterrows()}


def trajectory_frame(results: Sequence) -> pd.DataFrame:
    rows = []
    for r in results:
        row = {"frame_id": r.frame_id, "state": r.state.value}
        row.update(_pose_row(r.pose))
        row["inlier_count"] = r.inlier_count
        row["ms"] = float(r.timing.get("total", np.nan))
        rows.append(row)
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def write_trajectory(path: Union[str, Path], results: Sequence, include_timing: bool = True) -> Path:
    """Trajectory CSV; with `include_timing=False` the ms column is blank for byte-stable output."""
    df = trajectory_frame(results)
    if not include_timing:
        df["ms"] = np.nan
    path = Path(path)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_trajectory(path: Union[str, Path]) -> Dict[int, Optional[Pose]]:
    df = pd.read_csv(path)
    _require(df, TRAJECTORY_COLUMNS[:-2], "trajectory CSV")
    return {int(row["frame_id"]): _row_pose(row) for _, row in df.iterrows()}


# =====================
# Images
# =====================

def list_image_files(directory: Union[str, Path]) -> List[Path]:
    """Image files sorted by their numeric stem (then by name)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputFormatError(f"image directory not found: {directory}")
    files = [p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS]

    def key(p: Path):
        digits = "".join(ch for ch in p.stem if ch.isdigit())
        return (int(digits) if digits else -1, p.name)

    return sorted(files, key=key)


def load_image(path: Union[str, Path]) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise InputFormatError(f"cannot decode image {path}")
    if image.ndim == 3:
        image = cv2.cvtColor(image[..., :3], cv2.COLOR_BGR2RGB)
    return to_gray(image)


def iter_image_dir(directory: Union[str, Path]) -> Iterator[Tuple[int, np.ndarray]]:
    for frame_id, path in enumerate(list_image_files(directory)):
        yield frame_id, load_image(path)


def save_image_frames(images: Iterable[np.ndarray], directory: Union[str, Path]) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, image in enumerate(images):
        cv2.imwrite(str(directory / f"{i:06d}.png"), np.asarray(image, dtype=np.uint8))
        count += 1
    logger.info(f"[DataLoader] Saved {count} frames to {directory}")
    return count


# =====================
# Service uploads
# =====================

class DataLoader:
    """Stores uploaded files in a private temporary directory after validation."""

    def __init__(self):
        self.supported_extensions = ALLOWED_UPLOAD_EXTENSIONS
        self.max_file_size = MAX_UPLOAD_SIZE
        self.temp_dir = Path(tempfile.mkdtemp(prefix="shape_tracker_"))

    def save_upload(self, filename: str, content: bytes) -> Path:
        check = validate_file_upload(filename, len(content), self.supported_extensions, self.max_file_size)
        if not check["valid"]:
            raise InputFormatError(f"File validation failed: {'; '.join(check['errors'])}")
        for warning in check["warnings"]:
            logger.warning(f"[DataLoader] {filename}: {warning}")
        path = self.temp_dir / sanitize_filename(filename)
        path.write_bytes(content)
        return path
