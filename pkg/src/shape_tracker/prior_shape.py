"""
The pre-operative prior shape: mesh I/O, builtin shapes, dense surface sampling with a
KD-tree closest-point query, pseudo-segmentation masks, simulated depth and weighted
per-face texturing.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.neighbors import KDTree

from .configs.settings import (
    MASK_DILATION_PX,
    MASK_REFERENCE_WIDTH,
    SURFACE_SPACING_FRACTION,
    TEXTURE_WEIGHT_CAP,
)
from .errors import EmptyMesh, MeshParseError, OutOfBounds
from .geometry import Intrinsics, Pose, intersect_rays_triangles, rays_through_pixels
from .utils.cache import get_cache
from .utils.raster import NEAR_PLANE, clip_near, dilate, project_cam, rasterize_triangles
from .utils.validation import validate_mesh_path

logger = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12
DEFAULT_FACE_COLOR = (128.0, 128.0, 128.0)


@dataclass
class TriangleMesh:
    """
    Prior shape with per-face normal, color and texturing weight.

    Vertex positions and faces are never modified after construction; only
    `face_colors` and `face_weights` change (see `texture_update`).
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_normals: np.ndarray
    face_colors: np.ndarray
    face_weights: np.ndarray
    dropped_faces: int = 0

    @classmethod
    def from_arrays(
        cls,
        vertices: np.ndarray,
        faces: np.ndarray,
        face_colors: Optional[np.ndarray] = None,
    ) -> "TriangleMesh":
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(faces) == 0 or len(vertices) == 0:
            raise EmptyMesh("mesh has no faces")
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise MeshParseError(f"face index out of range (vertex count {len(vertices)})")

        tri = vertices[faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area = 0.5 * np.linalg.norm(cross, axis=1)
        keep = area > MIN_FACE_AREA
        dropped = int((~keep).sum())
        if dropped:
            logger.warning(f"[PriorShape] Dropped {dropped} degenerate face(s)")
        if not keep.any():
            raise EmptyMesh("mesh has no non-degenerate faces")

        normals = cross[keep] / (2.0 * area[keep, None])
        if face_colors is None:
            colors = np.tile(np.array(DEFAULT_FACE_COLOR), (int(keep.sum()), 1))
        else:
            colors = np.asarray(face_colors, dtype=float).reshape(-1, 3)[keep]
        return cls(
            vertices=vertices,
            faces=faces[keep],
            face_normals=normals,
            face_colors=colors,
            face_weights=np.zeros(int(keep.sum())),
            dropped_faces=dropped,
        )

    @property
    def face_vertices(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def face_areas(self) -> np.ndarray:
        tri = self.face_vertices
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @property
    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid."""
        areas = self.face_areas
        return (self.face_vertices.mean(axis=1) * areas[:, None]).sum(axis=0) / areas.sum()

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(
            self.vertices.copy(),
            self.faces.copy(),
            self.face_normals.copy(),
            self.face_colors.copy(),
            self.face_weights.copy(),
            self.dropped_faces,
        )


# =====================
# Mesh I/O
# =====================

def _parse_obj(lines: List[str]) -> Tuple[np.ndarray, np.ndarray]:
    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    for number, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "v":
            try:
                vertices.append([float(tok) for tok in tokens[1:4]])
            except ValueError as e:
                raise MeshParseError(f"bad vertex record: {e}", number)
            if len(vertices[-1]) != 3:
                raise MeshParseError("vertex record needs 3 coordinates", number)
        elif tokens[0] == "f":
            try:
                idx = [int(tok.split("/")[0]) for tok in tokens[1:]]
            except ValueError as e:
                raise MeshParseError(f"bad face record: {e}", number)
            if len(idx) < 3:
                raise MeshParseError("face record needs at least 3 vertices", number)
            idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
            for j in range(1, len(idx) - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
    return np.array(vertices, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_ply(lines: List[str]) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("missing 'ply' magic", 1)
    elements: List[Tuple[str, int, List[Tuple[str, ...]]]] = []
    body_start = None
    for number, raw in enumerate(lines[1:], 2):
        tokens = raw.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise MeshParseError(f"only ASCII PLY is supported, got {tokens[1]}", number)
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshParseError("property before element", number)
            elements[-1][2].append(tuple(tokens[1:]))
        elif tokens[0] == "end_header":
            body_start = number
            break
        else:
            raise MeshParseError(f"unexpected header record '{tokens[0]}'", number)
    if body_start is None:
        raise MeshParseError("missing end_header", len(lines))

    vertices = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    colors: Optional[np.ndarray] = None
    cursor = body_start
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            if cursor >= len(lines):
                raise MeshParseError(f"unexpected end of file in element '{name}'", cursor)
            rows.append((cursor + 1, lines[cursor].split()))
            cursor += 1
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                cols = [names.index(axis) for axis in ("x", "y", "z")]
                vertices = np.array([[float(tok[c]) for c in cols] for _, tok in rows], dtype=float)
            except (ValueError, IndexError) as e:
                raise MeshParseError(f"bad vertex element: {e}", body_start + 1)
        elif name == "face":
            face_list, face_colors = [], []
            prop_names = [p[-1] for p in props]
            for number, tok in rows:
                try:
                    n = int(tok[0])
                    idx = [int(v) for v in tok[1:1 + n]]
                    rest = tok[1 + n:]
                except (ValueError, IndexError) as e:
                    raise MeshParseError(f"bad face record: {e}", number)
                if n < 3:
                    raise MeshParseError("face record needs at least 3 vertices", number)
                for j in range(1, n - 1):
                    face_list.append([idx[0], idx[j], idx[j + 1]])
                if {"red", "green", "blue"} <= set(prop_names):
                    scalar_names = prop_names[1:]
                    rgb = [float(rest[scalar_names.index(c)]) for c in ("red", "green", "blue")]
                    face_colors.extend([rgb] * (n - 2))
            faces = np.array(face_list, dtype=np.int64).reshape(-1, 3)
            if face_colors:
                colors = np.array(face_colors, dtype=float)
    return vertices, faces, colors


def load_mesh(path: Union[str, Path]) -> TriangleMesh:
    """Load an ASCII OBJ or PLY mesh; normals are recomputed from the winding."""
    path = Path(path)
    validate_mesh_path(path)
    lines = path.read_text(encoding="utf-8", errors="replace").splitlines()
    if path.suffix.lower() == ".obj":
        vertices, faces = _parse_obj(lines)
        colors = None
    else:
        vertices, faces, colors = _parse_ply(lines)
    if len(faces) == 0:
        raise EmptyMesh(f"{path.name} contains no faces")
    mesh = TriangleMesh.from_arrays(vertices, faces, colors)
    logger.info(
        f"[PriorShape] Loaded {path.name}: {len(mesh.vertices)} vertices, "
        f"{len(mesh.faces)} faces, {mesh.dropped_faces} dropped"
    )
    return mesh


def save_ply(mesh: TriangleMesh, path: Union[str, Path]) -> Path:
    """Write the textured mesh as ASCII PLY with per-face uchar RGB and the texturing weight."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    colors = np.clip(np.rint(mesh.face_colors), 0, 255).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        "comment textured prior shape",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float weight",
        "end_header",
    ]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [
        f"3 {a} {b} {c} {r} {g} {bl} {w:.6g}"
        for (a, b, c), (r, g, bl), w in zip(mesh.faces, colors, mesh.face_weights)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# =====================
# Builtin shapes
# =====================

def _icosphere_arrays(subdivisions: int) -> Tuple[np.ndarray, np.ndarray]:
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    vertices = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        midpoint: Dict[Tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                midpoint[key] = len(vertices) - 1
            return midpoint[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return np.array(vertices), np.array(faces, dtype=np.int64)


def make_icosphere(subdivisions: int = 3, radius: float = 1.0, center: Sequence[float] = (0.0, 0.0, 0.0)) -> TriangleMesh:
    """Icosphere with 20 * 4**subdivisions outward-facing faces."""
    vertices, faces = _icosphere_arrays(subdivisions)
    return TriangleMesh.from_arrays(vertices * radius + np.asarray(center, dtype=float), faces)


def make_ellipsoid(radii: Sequence[float] = (1.0, 0.8, 0.6), subdivisions: int = 4) -> TriangleMesh:
    vertices, faces = _icosphere_arrays(subdivisions)
    return TriangleMesh.from_arrays(vertices * np.asarray(radii, dtype=float), faces)


def make_bumpy_ellipsoid(
    radii: Sequence[float] = (1.0, 0.8, 0.6),
    amplitude: float = 0.05,
    seed: int = 0,
    subdivisions: int = 4,
    n_waves: int = 6,
) -> TriangleMesh:
    """Ellipsoid with a smooth seeded radial displacement (sum of random plane waves)."""
    rng = np.random.default_rng(seed)
    directions, faces = _icosphere_arrays(subdivisions)
    wave_dirs = rng.normal(size=(n_waves, 3))
    wave_dirs /= np.linalg.norm(wave_dirs, axis=1, keepdims=True)
    freqs = rng.uniform(1.5, 4.0, size=n_waves)
    phases = rng.uniform(0, 2 * np.pi, size=n_waves)
    bumps = np.sin(directions @ (wave_dirs * freqs[:, None]).T + phases).mean(axis=1)
    scale = 1.0 + amplitude * bumps / max(np.abs(bumps).max(), 1e-12)
    return TriangleMesh.from_arrays(directions * scale[:, None] * np.asarray(radii, dtype=float), faces)


# =====================
# Surface index (closest point)
# =====================

@dataclass
class SurfaceIndex:
    """Dense area-uniform sample cloud of the mesh surface with an exact KD-tree."""

    samples: np.ndarray
    sample_faces: np.ndarray
    density: float
    tree: KDTree = field(repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def mean_spacing(self) -> float:
        return float(1.0 / np.sqrt(self.density))

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(np.ptp(self.samples, axis=0)))


def default_density(mesh: TriangleMesh) -> float:
    """Density giving a mean sample spacing of SURFACE_SPACING_FRACTION of the bbox diagonal."""
    spacing = SURFACE_SPACING_FRACTION * mesh.bbox_diagonal
    return 1.0 / spacing ** 2


def _sample_surface(mesh: TriangleMesh, density: float, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    count = int(round(density * areas.sum()))
    face_ids = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.face_vertices[face_ids]
    points = (
        (1.0 - r1)[:, None] * tri[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    return {"samples": points, "sample_faces": face_ids}


def build_surface_index(mesh: TriangleMesh, density: Optional[float] = None, seed: int = 0) -> SurfaceIndex:
    if density is None or density <= 0:
        density = default_density(mesh)

    cache = get_cache()
    cached = cache.get_surface_samples(mesh.vertices, mesh.faces, density, seed) if cache else None
    if cached is None:
        cached = _sample_surface(mesh, density, seed)
        if cache:
            cache.set_surface_samples(mesh.vertices, mesh.faces, density, seed, cached)
    else:
        logger.debug("[PriorShape] Surface samples served from cache")

    samples = cached["samples"]
    if len(samples) == 0:
        raise EmptyMesh(f"density {density} produced no surface samples")
    logger.info(f"[PriorShape] Surface index: {len(samples)} samples at density {density:.1f}")
    return SurfaceIndex(samples=samples, sample_faces=cached["sample_faces"], density=density, tree=KDTree(samples))


def closest_points(index: SurfaceIndex, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch nearest-sample query; returns (points, distances, sample ids). Ties go to the lowest id."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    n_neighbors = min(4, len(index))
    dist, ids = index.tree.query(queries, k=n_neighbors)
    best = ids[:, 0].copy()
    for j in range(1, n_neighbors):
        tie = (dist[:, j] == dist[:, 0]) & (ids[:, j] < best)
        best[tie] = ids[tie, j]
    points = index.samples[best]
    return points, np.linalg.norm(queries - points, axis=1), best


def closest_point(index: SurfaceIndex, query: np.ndarray) -> Tuple[np.ndarray, float]:
    points, dists, _ = closest_points(index, np.asarray(query, dtype=float).reshape(1, 3))
    return points[0], float(dists[0])


# =====================
# Rendering
# =====================

@dataclass(frozen=True, eq=False)
class BinaryMask:
    width: int
    height: int
    bits: np.ndarray

    @classmethod
    def full(cls, k: Intrinsics, value: bool = True) -> "BinaryMask":
        return cls(k.width, k.height, np.full((k.height, k.width), value, dtype=bool))

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @property
    def coverage(self) -> float:
        return self.area / float(self.width * self.height)

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """Mask lookup at the nearest pixel centre; outside the image counts as unset."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        if len(pixels) == 0:
            return np.zeros(0, dtype=bool)
        cols = np.rint(pixels[:, 0])
        rows = np.rint(pixels[:, 1])
        inside = (cols >= 0) & (cols < self.width) & (rows >= 0) & (rows < self.height)
        out = np.zeros(len(pixels), dtype=bool)
        out[inside] = self.bits[rows[inside].astype(int), cols[inside].astype(int)]
        return out


def scaled_dilation(k: Intrinsics, dilation_px: int = MASK_DILATION_PX) -> int:
    """Default dilation is defined at 1280 px width and scales with the image width."""
    return int(round(dilation_px * k.width / MASK_REFERENCE_WIDTH))


def _raster_faces(mesh: TriangleMesh, pose: Pose, k: Intrinsics, face_subset: Optional[np.ndarray] = None):
    cam_tris = pose.transform(mesh.vertices)[mesh.faces]
    face_ids = np.arange(len(mesh.faces))
    if face_subset is not None:
        cam_tris, face_ids = cam_tris[face_subset], face_ids[face_subset]
    clipped, source = clip_near(cam_tris, NEAR_PLANE)
    tri2d = project_cam(clipped, k.fx, k.fy, k.cx, k.cy)
    tri_idx, rows, cols, _ = rasterize_triangles(tri2d, k.width, k.height)
    return face_ids[source[tri_idx]], rows, cols


def render_mask(mesh: TriangleMesh, pose: Pose, k: Intrinsics, dilation_px: int = 0) -> BinaryMask:
    """Silhouette of the mesh at `pose` (union of projected triangles), dilated."""
    if dilation_px < 0:
        raise ValueError("dilation_px must be >= 0")
    bits = np.zeros((k.height, k.width), dtype=bool)
    _, rows, cols = _raster_faces(mesh, pose, k)
    bits[rows, cols] = True
    return BinaryMask(k.width, k.height, dilate(bits, dilation_px))


def _candidate_boxes(mesh: TriangleMesh, pose: Pose, k: Intrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Per-face projected pixel boxes (xmin, xmax, ymin, ymax), unbounded for near-plane crossers."""
    cam_tris = pose.transform(mesh.vertices)[mesh.faces]
    crossing = np.any(cam_tris[:, :, 2] < NEAR_PLANE, axis=1)
    all_behind = np.all(cam_tris[:, :, 2] < NEAR_PLANE, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tri2d = project_cam(cam_tris, k.fx, k.fy, k.cx, k.cy)
    boxes = np.stack(
        [tri2d[..., 0].min(axis=1) - 1, tri2d[..., 0].max(axis=1) + 1,
         tri2d[..., 1].min(axis=1) - 1, tri2d[..., 1].max(axis=1) + 1],
        axis=1,
    )
    boxes[crossing] = [-np.inf, np.inf, -np.inf, np.inf]
    return boxes, ~all_behind


def render_depth(mesh: TriangleMesh, pose: Pose, k: Intrinsics, pixels: np.ndarray, chunk: int = 128) -> np.ndarray:
    """
    Camera-frame depth of the nearest mesh hit along each pixel ray; NaN where the ray
    misses every triangle (NoHit).
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    if len(pixels) == 0:
        return np.zeros(0)
    if not np.all(k.in_bounds(pixels)):
        raise OutOfBounds("render_depth pixels must lie inside the image")

    origin, directions = rays_through_pixels(pose, k, pixels)
    boxes, usable = _candidate_boxes(mesh, pose, k)
    usable_ids = np.nonzero(usable)[0]
    boxes = boxes[usable_ids]
    tri = mesh.face_vertices[usable_ids]
    best_t = np.full(len(pixels), np.nan)

    for start in range(0, len(pixels), chunk):
        px = pixels[start:start + chunk]
        cand = (
            (px[:, 0, None] >= boxes[None, :, 0]) & (px[:, 0, None] <= boxes[None, :, 1])
            & (px[:, 1, None] >= boxes[None, :, 2]) & (px[:, 1, None] <= boxes[None, :, 3])
        )
        pix_idx, face_idx = np.nonzero(cand)
        if len(pix_idx) == 0:
            continue
        t, _, _ = intersect_rays_triangles(
            origin[None, :], directions[start + pix_idx], tri[face_idx, 0], tri[face_idx, 1], tri[face_idx, 2]
        )
        hit = ~np.isnan(t)
        chunk_best = np.full(len(px), np.inf)
        np.minimum.at(chunk_best, pix_idx[hit], t[hit])
        chunk_best[np.isinf(chunk_best)] = np.nan
        best_t[start:start + len(px)] = chunk_best

    hits = origin[None, :] + best_t[:, None] * directions
    return pose.transform(hits)[:, 2]


# =====================
# Texturing
# =====================

def texture_update(mesh: TriangleMesh, pose: Pose, image: np.ndarray, k: Intrinsics) -> int:
    """
    Blend the mean image color of every front-facing projected face into its running
    average; returns the number of faces updated. Weights saturate at TEXTURE_WEIGHT_CAP.
    """
    image = np.asarray(image, dtype=float)
    if image.shape[:2] != (k.height, k.width):
        raise ValueError(f"image shape {image.shape[:2]} does not match intrinsics {(k.height, k.width)}")
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)

    normal_z = mesh.face_normals @ pose.rotation[2]
    front = np.nonzero(normal_z < 0)[0]
    if len(front) == 0:
        return 0

    face_ids, rows, cols = _raster_faces(mesh, pose, k, face_subset=front)
    if len(face_ids) == 0:
        return 0
    n_faces = len(mesh.faces)
    counts = np.bincount(face_ids, minlength=n_faces).astype(float)
    sums = np.stack(
        [np.bincount(face_ids, weights=image[rows, cols, c], minlength=n_faces) for c in range(3)], axis=1
    )
    updated = np.nonzero(counts > 0)[0]
    mean_color = sums[updated] / counts[updated, None]
    w = mesh.face_weights[updated]
    mesh.face_colors[updated] = (w[:, None] * mesh.face_colors[updated] + mean_color) / (w[:, None] + 1.0)
    mesh.face_weights[updated] = np.minimum(TEXTURE_WEIGHT_CAP, w + 1.0)
    logger.debug(f"[PriorShape] Textured {len(updated)} faces")
    return int(len(updated))
