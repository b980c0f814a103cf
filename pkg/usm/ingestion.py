"""
Frame loading and back-projection.

A scene directory holds a JSON manifest::

    {
      "version": 1,
      "frames": [
        {"depth": "view_000_depth.pfm", "mask": "view_000_mask.pgm",
         "intrinsics": "view_000_intrinsics.txt", "pose": "view_000_pose.txt"}
      ],
      "ground_truth": {"pose": "gt_pose.txt", "latent": [...],
                       "decoder": "analytic", "mesh": null}
    }

Paths are relative to the manifest.  Intrinsics text is
``fx fy cx cy width height``; poses are the upper 3×4 block of ``T_wc``
as twelve decimals.  The ``ground_truth`` block and each of its entries are
optional; a ground-truth ``mesh`` is given in the canonical object frame and
placed in the world by the ground-truth pose.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import FormatError, InvalidInputError
from .geometry import Pose9, log_pose, parse_pose_text
from .storage import optional_path, read_pfm, read_pgm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_ORTHO_TOL = 1e-6


# ── Data classes ──────────────────────────────────────────────────────────────


@dataclass
class Intrinsics:
    """Pinhole intrinsics in pixels; ``u`` indexes columns and ``v`` rows."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_text(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<intrinsics>") -> "Intrinsics":
        fields = text.split()
        if len(fields) != 6:
            raise FormatError(f"{source}: intrinsics need 'fx fy cx cy width height', found {len(fields)} field(s)")
        try:
            fx, fy, cx, cy = (float(v) for v in fields[:4])
            width, height = int(fields[4]), int(fields[5])
        except ValueError as exc:
            raise FormatError(f"{source}: malformed intrinsics ({exc})") from exc
        try:
            return cls(fx, fy, cx, cy, width, height)
        except InvalidInputError as exc:
            raise FormatError(f"{source}: {exc}") from exc


@dataclass
class DepthFrame:
    """One depth view: meters (``<= 0`` invalid), boolean object mask, intrinsics and ``T_wc``."""

    depth: np.ndarray
    mask: np.ndarray
    intrinsics: Intrinsics
    T_wc: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.T_wc = np.asarray(self.T_wc, dtype=float)
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != shape:
            raise InvalidInputError(f"depth raster {self.depth.shape} does not match intrinsics {shape}")
        if self.mask.shape != shape:
            raise InvalidInputError(f"mask raster {self.mask.shape} does not match intrinsics {shape}")
        if self.T_wc.shape != (4, 4):
            raise InvalidInputError(f"camera pose must be 4x4, got {self.T_wc.shape}")
        R = self.T_wc[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise InvalidInputError("camera pose rotation block is not orthogonal")


@dataclass
class GroundTruth:
    pose: Optional[Pose9] = None
    latent: Optional[np.ndarray] = None
    decoder: Optional[str] = None
    mesh_path: Optional[Path] = None


@dataclass
class Scene:
    frames: List[DepthFrame]
    ground_truth: Optional[GroundTruth] = None
    root: Path = field(default_factory=Path)


# ── Pinhole maps ──────────────────────────────────────────────────────────────


def back_project(frame: DepthFrame) -> np.ndarray:
    """Camera-frame points ``d K⁻¹ (u, v, 1)`` for masked pixels with valid depth, shape ``(N, 3)``."""
    v, u = np.nonzero(frame.mask & (frame.depth > 0))
    d = frame.depth[v, u]
    k = frame.intrinsics
    return np.stack([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d], axis=1)


def project(points_c: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` of camera-frame points; shape ``(N, 2)``."""
    p = np.asarray(points_c, dtype=float).reshape(-1, 3)
    return np.stack(
        [intrinsics.fx * p[:, 0] / p[:, 2] + intrinsics.cx, intrinsics.fy * p[:, 1] / p[:, 2] + intrinsics.cy],
        axis=1,
    )


def assemble_world_points(frames: Sequence[DepthFrame], subsample: int, seed: int = 0) -> np.ndarray:
    """
    Back-project every frame into the world and keep at most *subsample* points.

    The selection is a seeded uniform draw without replacement; the kept
    points are returned in their original order.

    Raises:
        InvalidInputError: If no frame contributes a point.
    """
    clouds = []
    for frame in frames:
        pts = back_project(frame)
        clouds.append(pts @ frame.T_wc[:3, :3].T + frame.T_wc[:3, 3])
    points = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    if points.shape[0] == 0:
        raise InvalidInputError("no valid object pixels in any frame")
    if points.shape[0] > subsample:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(points.shape[0], size=subsample, replace=False))
        points = points[keep]
    logger.debug("Assembled %d world point(s) from %d frame(s).", points.shape[0], len(frames))
    return points


# ── Manifest loading ──────────────────────────────────────────────────────────


def _read_text(path: Path, what: str) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {what} {path}: {exc}") from exc


def _load_frame(root: Path, entry: dict, index: int) -> DepthFrame:
    try:
        depth_path = root / entry["depth"]
        mask_path = root / entry["mask"]
        intr_path = root / entry["intrinsics"]
        pose_path = root / entry["pose"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest frame {index}: missing field {exc}") from exc
    intrinsics = Intrinsics.from_text(_read_text(intr_path, "intrinsics"), str(intr_path))
    T_wc = parse_pose_text(_read_text(pose_path, "camera pose"), str(pose_path))
    depth = read_pfm(depth_path)
    mask = read_pgm(mask_path)
    try:
        return DepthFrame(depth, mask, intrinsics, T_wc, name=depth_path.stem)
    except InvalidInputError as exc:
        raise FormatError(f"manifest frame {index} ({depth_path}): {exc}") from exc


def _load_ground_truth(root: Path, block: dict) -> GroundTruth:
    gt = GroundTruth()
    pose_path = optional_path(root, block.get("pose"))
    if pose_path is not None:
        gt.pose = log_pose(parse_pose_text(_read_text(pose_path, "ground-truth pose"), str(pose_path)))
    if block.get("latent") is not None:
        gt.latent = np.asarray(block["latent"], dtype=float)
    gt.decoder = block.get("decoder")
    gt.mesh_path = optional_path(root, block.get("mesh"))
    return gt


def load_scene(manifest_path: Union[str, Path], workers: Optional[int] = None) -> Scene:
    """
    Load every frame listed in a manifest (a file, or a directory holding
    ``manifest.json``).

    Frames load concurrently on up to *workers* threads; the returned list
    keeps manifest order.

    Raises:
        FormatError: Missing or malformed manifest, raster or text file, or
                     inconsistent dimensions.
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc

    root = path.parent
    entries = manifest.get("frames") if isinstance(manifest, dict) else None
    if not entries:
        raise FormatError(f"{path}: manifest lists no frames")

    pool_size = max(1, min(workers or len(entries), len(entries)))
    if pool_size == 1:
        frames = [_load_frame(root, e, i) for i, e in enumerate(entries)]
    else:
        with ThreadPoolExecutor(max_workers=pool_size, thread_name_prefix="usm") as pool:
            futures = [pool.submit(_load_frame, root, e, i) for i, e in enumerate(entries)]
            frames = [f.result() for f in futures]

    gt_block = manifest.get("ground_truth")
    ground_truth = _load_ground_truth(root, gt_block) if gt_block else None
    logger.info(
        "Loaded %d frame(s) from %s%s.",
        len(frames), path, " with ground truth" if ground_truth else "",
    )
    return Scene(frames=frames, ground_truth=ground_truth, root=root)
