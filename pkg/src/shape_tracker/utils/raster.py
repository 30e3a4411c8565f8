"""
CPU triangle rasterization on pixel centres.

Triangles are processed in batches bucketed by bounding-box size so every batch is a
dense (triangles x candidate pixels) edge-function evaluation.
"""
from typing import List, Tuple

import cv2
import numpy as np

NEAR_PLANE = 1e-6
_MAX_BATCH_ELEMENTS = 2_000_000


def clip_near(cam_tris: np.ndarray, near: float = NEAR_PLANE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Clip camera-frame triangles (F, 3, 3) against the plane z = near.

    Returns (triangles, source face index); a triangle with one vertex behind the plane
    becomes two triangles, one with two behind becomes one.
    """
    behind = cam_tris[:, :, 2] < near
    n_behind = behind.sum(axis=1)
    keep = n_behind == 0
    out_tris: List[np.ndarray] = [cam_tris[keep]]
    out_ids: List[np.ndarray] = [np.nonzero(keep)[0]]

    for face in np.nonzero((n_behind == 1) | (n_behind == 2))[0]:
        tri = cam_tris[face]
        polygon = []
        for i in range(3):
            a, b = tri[i], tri[(i + 1) % 3]
            a_in, b_in = a[2] >= near, b[2] >= near
            if a_in:
                polygon.append(a)
            if a_in != b_in:
                s = (near - a[2]) / (b[2] - a[2])
                polygon.append(a + s * (b - a))
        for j in range(1, len(polygon) - 1):
            out_tris.append(np.stack([polygon[0], polygon[j], polygon[j + 1]])[None])
            out_ids.append(np.array([face]))

    return np.concatenate(out_tris, axis=0), np.concatenate(out_ids)


def project_cam(cam: np.ndarray, fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.stack([fx * cam[..., 0] / cam[..., 2] + cx, fy * cam[..., 1] / cam[..., 2] + cy], axis=-1)


def _owned(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # top-left rule: zero edge values count only on owned edges
    return (dy > 0) | ((dy == 0) & (dx < 0))


def rasterize_triangles(
    tri2d: np.ndarray, width: int, height: int, with_barycentric: bool = False
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Enumerate pixel centres covered by 2D triangles (F, 3, 2).

    Returns (triangle index, row, col, barycentric (N, 3) or empty).
    """
    tri2d = np.asarray(tri2d, dtype=float)
    empty = np.zeros(0, dtype=np.int64)
    if len(tri2d) == 0:
        return empty, empty, empty, np.zeros((0, 3))

    finite = np.all(np.isfinite(tri2d.reshape(len(tri2d), -1)), axis=1)
    x, y = tri2d[..., 0], tri2d[..., 1]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (y[:, 1] - y[:, 0]) * (x[:, 2] - x[:, 0])
    with np.errstate(invalid="ignore"):
        xmin = np.clip(np.ceil(x.min(axis=1)), 0, width - 1)
        xmax = np.clip(np.floor(x.max(axis=1)), 0, width - 1)
        ymin = np.clip(np.ceil(y.min(axis=1)), 0, height - 1)
        ymax = np.clip(np.floor(y.max(axis=1)), 0, height - 1)
        valid = (
            finite
            & (area2 != 0)
            & (x.max(axis=1) >= 0)
            & (x.min(axis=1) <= width - 1)
            & (y.max(axis=1) >= 0)
            & (y.min(axis=1) <= height - 1)
            & (xmax >= xmin)
            & (ymax >= ymin)
        )
    idx_valid = np.nonzero(valid)[0]
    if len(idx_valid) == 0:
        return empty, empty, empty, np.zeros((0, 3))

    box_w = (xmax - xmin + 1)[idx_valid].astype(np.int64)
    box_h = (ymax - ymin + 1)[idx_valid].astype(np.int64)
    side = np.maximum(box_w, box_h)
    bucket = np.ceil(np.log2(np.maximum(side, 1))).astype(np.int64)

    out_f, out_r, out_c, out_b = [], [], [], []
    for level in np.unique(bucket):
        size = int(2 ** level)
        members = idx_valid[bucket == level]
        offsets = np.arange(size * size)
        dx, dy = offsets % size, offsets // size
        per_chunk = max(1, _MAX_BATCH_ELEMENTS // (size * size))
        for start in range(0, len(members), per_chunk):
            tri_ids = members[start:start + per_chunk]
            cols = xmin[tri_ids, None].astype(np.int64) + dx[None, :]
            rows = ymin[tri_ids, None].astype(np.int64) + dy[None, :]
            in_box = (cols <= xmax[tri_ids, None]) & (rows <= ymax[tri_ids, None])

            tx, ty = x[tri_ids], y[tri_ids]
            sign = np.sign(area2[tri_ids])[:, None]
            inside = in_box.copy()
            edges = []
            for i, j in ((1, 2), (2, 0), (0, 1)):
                ex = (tx[:, j] - tx[:, i])[:, None]
                ey = (ty[:, j] - ty[:, i])[:, None]
                e = ex * (rows - ty[:, i, None]) - ey * (cols - tx[:, i, None])
                se = sign * e
                inside &= (se > 0) | ((se == 0) & _owned(sign * ex, sign * ey))
                edges.append(e)

            hit_t, hit_p = np.nonzero(inside)
            out_f.append(tri_ids[hit_t])
            out_r.append(rows[hit_t, hit_p])
            out_c.append(cols[hit_t, hit_p])
            if with_barycentric:
                denom = area2[tri_ids][hit_t]
                out_b.append(np.stack([e[hit_t, hit_p] / denom for e in edges], axis=1))

    faces = np.concatenate(out_f)
    bary = np.concatenate(out_b) if with_barycentric else np.zeros((0, 3))
    return faces, np.concatenate(out_r), np.concatenate(out_c), bary


def dilate(bits: np.ndarray, radius_px: int) -> np.ndarray:
    """Binary dilation with a (2r+1) x (2r+1) square structuring element."""
    if radius_px <= 0:
        return bits.copy()
    kernel = np.ones((2 * radius_px + 1, 2 * radius_px + 1), dtype=np.uint8)
    return cv2.dilate(bits.astype(np.uint8), kernel) > 0
