"""
Reconstruction metrics: 9-DoF pose correctness, volumetric IoU, Chamfer
distance, uncertainty/error correlation and Marching-Cubes meshes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import mcubes
import numpy as np
import trimesh
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from scipy.stats import pearsonr

from .decoder import LatentGaussian, SdfDecoder, decode, project_to_surface
from .errors import InvalidInputError, UndefinedCorrelationError
from .geometry import Pose9, PoseGaussian, to_object_frame, transform_point
from .propagation import sdf_distribution

logger = logging.getLogger(__name__)

MESH_BOUND = 1.1
_CHUNK = 65536


# ── Pose ──────────────────────────────────────────────────────────────────────


@dataclass
class PoseErrors:
    translation: float   # meters
    rotation: float      # degrees
    scale: float         # max per-axis relative error


@dataclass
class PoseThresholds:
    translation: float = 0.2
    rotation: float = 20.0
    scale: float = 0.2


def pose_error(est: Pose9, gt: Pose9) -> PoseErrors:
    """Translation distance, geodesic rotation angle and worst per-axis scale ratio error."""
    relative = est.rotation().T @ gt.rotation()
    angle = float(np.degrees(Rotation.from_matrix(relative).magnitude()))
    return PoseErrors(
        translation=float(np.linalg.norm(est.t - gt.t)),
        rotation=angle,
        scale=float(np.max(np.abs(est.s / gt.s - 1.0))),
    )


def pose_correct(errors: PoseErrors, thresholds: Optional[PoseThresholds] = None) -> bool:
    """All three errors strictly below their thresholds."""
    th = thresholds or PoseThresholds()
    return errors.translation < th.translation and errors.rotation < th.rotation and errors.scale < th.scale


# ── Shapes ────────────────────────────────────────────────────────────────────


@dataclass
class ShapeInstance:
    """A decoder, a latent code and the pose placing that shape in the world."""

    decoder: SdfDecoder
    z: np.ndarray
    pose: Pose9

    def sdf(self, points_w: np.ndarray) -> np.ndarray:
        pts = np.asarray(points_w, dtype=float).reshape(-1, 3)
        out = np.empty(pts.shape[0])
        for start in range(0, pts.shape[0], _CHUNK):
            chunk = to_object_frame(self.pose, pts[start:start + _CHUNK])
            out[start:start + _CHUNK] = np.atleast_1d(decode(self.decoder, self.z, chunk))
        return out

    def world_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned world box around the posed canonical bounding cube."""
        b = self.decoder.canonical_extent(self.z)
        corners = np.array([[x, y, z] for x in (-b, b) for y in (-b, b) for z in (-b, b)])
        world = transform_point(self.pose, corners)
        return world.min(axis=0), world.max(axis=0)


@dataclass
class ExtractedMesh:
    mesh: trimesh.Trimesh
    empty: bool
    watertight: bool


def _sdf_grid(decoder: SdfDecoder, z: np.ndarray, resolution: int, bound: float) -> np.ndarray:
    axis = np.linspace(-bound, bound, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.empty(grid.shape[0])
    for start in range(0, grid.shape[0], _CHUNK):
        values[start:start + _CHUNK] = np.atleast_1d(decode(decoder, z, grid[start:start + _CHUNK]))
    return values.reshape(resolution, resolution, resolution)


def extract_mesh(decoder: SdfDecoder, z: np.ndarray, resolution: int = 64, bound: float = MESH_BOUND) -> ExtractedMesh:
    """
    Canonical-frame zero level set by Marching Cubes over ``[-bound, bound]³``.

    Faces are oriented outwards (positive enclosed volume).  A field that
    never crosses zero yields an empty mesh with ``empty=True``.
    """
    if resolution < 8:
        raise InvalidInputError(f"mesh resolution must be >= 8, got {resolution}")
    volume = _sdf_grid(decoder, z, resolution, bound)
    if volume.min() > 0.0 or volume.max() < 0.0:
        logger.warning("SDF does not cross zero inside the mesh grid; returning an empty mesh.")
        return ExtractedMesh(trimesh.Trimesh(), empty=True, watertight=False)
    step = 2.0 * bound / (resolution - 1)
    verts, faces = mcubes.marching_cubes(volume, 0.0)
    mesh = trimesh.Trimesh(vertices=verts * step - bound, faces=faces, process=True)
    if mesh.volume < 0:
        mesh.invert()
    logger.info("Marching Cubes at %d³: %d vertices, %d faces.", resolution, len(mesh.vertices), len(mesh.faces))
    return ExtractedMesh(mesh, empty=False, watertight=bool(mesh.is_watertight))


def iou_3d(est: ShapeInstance, gt: ShapeInstance, grid_res: int = 64) -> float:
    """
    Volumetric IoU of two posed shapes on a shared world grid spanning the
    union of their bounding boxes padded by 10%; a voxel is occupied when the
    SDF at its centre is ``<= 0``.
    """
    if grid_res < 8:
        raise InvalidInputError(f"IoU grid resolution must be >= 8, got {grid_res}")
    lo_a, hi_a = est.world_bounds()
    lo_b, hi_b = gt.world_bounds()
    lo, hi = np.minimum(lo_a, lo_b), np.maximum(hi_a, hi_b)
    pad = 0.1 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    step = (hi - lo) / grid_res
    axes = [lo[i] + (np.arange(grid_res) + 0.5) * step[i] for i in range(3)]
    centres = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    occ_a = est.sdf(centres) <= 0.0
    occ_b = gt.sdf(centres) <= 0.0
    union = int(np.count_nonzero(occ_a | occ_b))
    if union == 0:
        raise InvalidInputError("both shapes are empty on the IoU grid")
    return float(np.count_nonzero(occ_a & occ_b)) / union


def chamfer(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance."""
    a = np.asarray(points_a, dtype=float).reshape(-1, 3)
    b = np.asarray(points_b, dtype=float).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidInputError("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def sample_mesh_surface(mesh: trimesh.Trimesh, count: int = 10000, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on *mesh*."""
    if len(mesh.faces) == 0:
        raise InvalidInputError("cannot sample an empty mesh")
    points, _ = trimesh.sample.sample_surface(mesh, count, seed=seed)
    return np.asarray(points, dtype=float)


def sample_shape_surface(
    shape: ShapeInstance, count: int = 10000, resolution: int = 64, seed: int = 0
) -> np.ndarray:
    """
    World-frame samples on a posed shape's zero level set: area-weighted
    samples of its Marching-Cubes mesh, snapped onto the exact level set with
    a few Newton steps.
    """
    extracted = extract_mesh(shape.decoder, shape.z, resolution, bound=MESH_BOUND * shape.decoder.canonical_extent(shape.z))
    if extracted.empty:
        raise InvalidInputError("shape has no surface to sample")
    canonical = sample_mesh_surface(extracted.mesh, count, seed)
    canonical, _ = project_to_surface(shape.decoder, shape.z, canonical, iters=3)
    return transform_point(shape.pose, canonical)


# ── Uncertainty ───────────────────────────────────────────────────────────────


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise InvalidInputError("Pearson correlation needs two equally sized samples of at least 2 values")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for constant input")
    return float(pearsonr(x, y)[0])


@dataclass
class CorrelationResult:
    r: float
    points: np.ndarray
    sdf_mean: np.ndarray
    sdf_std: np.ndarray
    abs_error: np.ndarray


def uncertainty_correlation(
    decoder: SdfDecoder,
    z: LatentGaussian,
    pose: PoseGaussian,
    gt_points_w: np.ndarray,
) -> CorrelationResult:
    """
    Correlate the predicted SDF standard deviation with the absolute SDF error
    at ground-truth surface points (whose true SDF is zero).

    Raises:
        UndefinedCorrelationError: All predicted deviations (or errors) are equal.
    """
    points = np.asarray(gt_points_w, dtype=float).reshape(-1, 3)
    g = sdf_distribution(decoder, z, pose, points)
    mean = np.atleast_1d(g.mean)
    std = np.sqrt(np.maximum(np.atleast_1d(g.var), 0.0))
    error = np.abs(mean)
    r = pearson(std, error)
    logger.info("Uncertainty/error Pearson r = %.4f over %d point(s).", r, points.shape[0])
    return CorrelationResult(r, points, mean, std, error)


# ── Aggregates ────────────────────────────────────────────────────────────────


@dataclass
class ObjectMetrics:
    """One object's evaluation; ``None`` marks a metric that was not computed."""

    name: str
    errors: PoseErrors
    correct: bool
    iou: Optional[float] = None
    chamfer: Optional[float] = None
    pearson_r: Optional[float] = None

    def as_row(self) -> Dict[str, Any]:
        def fmt(v: Optional[float]) -> Any:
            return "" if v is None else v

        return {
            "object": self.name,
            "translation_error": self.errors.translation,
            "rotation_error_deg": self.errors.rotation,
            "scale_error": self.errors.scale,
            "pose_correct": int(self.correct),
            "iou": fmt(self.iou),
            "chamfer": fmt(self.chamfer),
            "pearson_r": fmt(self.pearson_r),
        }


@dataclass
class DetectionRates:
    count: int
    pose: float
    iou: float
    chamfer: float


def detection_rates(
    rows: Sequence[Dict[str, Any]],
    iou_threshold: float = 0.25,
    chamfer_threshold: float = 0.2,
) -> DetectionRates:
    """
    Fraction of objects counted as correct under each criterion: 9-DoF pose
    within thresholds, IoU above *iou_threshold*, Chamfer below
    *chamfer_threshold*.  Blank metrics count as failures.
    """
    if not rows:
        raise InvalidInputError("no metric rows to aggregate")

    def value(row: Dict[str, Any], key: str) -> Optional[float]:
        raw = row.get(key, "")
        return None if raw in ("", None) else float(raw)

    n = len(rows)
    pose_ok = sum(1 for r in rows if value(r, "pose_correct") == 1.0)
    iou_ok = sum(1 for r in rows if (v := value(r, "iou")) is not None and v > iou_threshold)
    cd_ok = sum(1 for r in rows if (v := value(r, "chamfer")) is not None and v < chamfer_threshold)
    return DetectionRates(count=n, pose=pose_ok / n, iou=iou_ok / n, chamfer=cd_ok / n)
