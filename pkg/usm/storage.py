"""
File formats for scenes and results.

Rasters:
    * depth – PFM (``Pf``, one float32 channel, negative scale = little-endian,
      scanlines bottom-to-top), meters, ``<= 0`` marks invalid pixels.
    * mask  – binary PGM (``P5``, maxval 255), 255 = object, 0 = background.

Results are plain JSON and CSV so that every artifact is diffable and
byte-identical across runs with equal seeds (no timestamps are written).
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from trimesh.exchange.obj import export_obj

from .decoder import LatentGaussian
from .errors import FormatError
from .geometry import Pose9, PoseGaussian

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HISTORY_COLUMNS = ["iter", "L3D", "L2D", "reg", "total"]
METRIC_COLUMNS = [
    "object", "translation_error", "rotation_error_deg", "scale_error",
    "pose_correct", "iou", "chamfer", "pearson_r",
]
SCATTER_COLUMNS = ["x", "y", "z", "sdf_mean", "sdf_std", "abs_error"]
BETA_COLUMNS = ["u", "v", "depth_mean", "depth_std", "escape_mean", "escape_var", "alpha", "beta"]


# ── Netpbm-style headers ──────────────────────────────────────────────────────


def _header_tokens(data: bytes, count: int, source: str) -> Tuple[List[bytes], int]:
    """Read *count* whitespace-separated header tokens (``#`` comments allowed)."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the payload
    return tokens, pos + 1


def _dimension(token: bytes, name: str, source: str) -> int:
    try:
        value = int(token)
    except ValueError as exc:
        raise FormatError(f"{source}: {name} is not an integer ({token!r})") from exc
    if value <= 0:
        raise FormatError(f"{source}: {name} must be positive, got {value}")
    return value


# ── PFM depth ─────────────────────────────────────────────────────────────────


def write_pfm(path: PathLike, image: np.ndarray) -> Path:
    path = Path(path)
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise FormatError(f"{path}: PFM writer expects a 2-D raster, got shape {image.shape}")
    h, w = image.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(np.flipud(image)).tobytes())
    return path


def read_pfm(path: PathLike) -> np.ndarray:
    """
    Read a single-channel little-endian PFM as float64 ``(H, W)``, row 0 at the top.

    Raises:
        FormatError: Missing file, colour PFM, big-endian scale, bad header or size.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read depth raster {path}: {exc}") from exc
    tokens, offset = _header_tokens(data, 4, str(path))
    if tokens[0] != b"Pf":
        raise FormatError(f"{path}: expected PFM magic 'Pf', got {tokens[0]!r}")
    w = _dimension(tokens[1], "width", str(path))
    h = _dimension(tokens[2], "height", str(path))
    try:
        scale = float(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: scale is not a number ({tokens[3]!r})") from exc
    if scale > 0:
        raise FormatError(f"{path}: big-endian PFM (positive scale) is not supported")
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be non-zero")
    payload = data[offset:]
    if len(payload) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} payload bytes, found {len(payload)}")
    rows = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return np.flipud(rows).astype(float)


# ── PGM mask ──────────────────────────────────────────────────────────────────


def write_pgm(path: PathLike, mask: np.ndarray) -> Path:
    path = Path(path)
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    path.write_bytes(header + (mask.astype(np.uint8) * 255).tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a binary ``P5`` mask as a boolean ``(H, W)`` array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read mask raster {path}: {exc}") from exc
    tokens, offset = _header_tokens(data, 4, str(path))
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: expected PGM magic 'P5', got {tokens[0]!r}")
    w = _dimension(tokens[1], "width", str(path))
    h = _dimension(tokens[2], "height", str(path))
    if _dimension(tokens[3], "maxval", str(path)) != 255:
        raise FormatError(f"{path}: mask maxval must be 255")
    payload = data[offset:]
    if len(payload) != w * h:
        raise FormatError(f"{path}: expected {w * h} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if np.any((values != 0) & (values != 255)):
        raise FormatError(f"{path}: mask must be binary (0 or 255)")
    return values == 255


# ── Fit results ───────────────────────────────────────────────────────────────


@dataclass
class StoredResult:
    """A fitted state as read back from a result file."""

    z: LatentGaussian
    pose: PoseGaussian
    decoder: str
    iterations: int
    history: List[List[float]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    ray_bounds: Optional[Tuple[np.ndarray, float]] = None   # (center, radius) used while fitting


def save_result_json(
    path: PathLike,
    z: LatentGaussian,
    pose: PoseGaussian,
    decoder: str,
    iterations: int,
    history: Sequence[Sequence[float]],
    config: Any,
    ray_bounds: Optional[Tuple[Sequence[float], float]] = None,
) -> Path:
    """Write a fitted state; *config* is a dataclass echoed verbatim."""
    path = Path(path)
    payload = {
        "decoder": decoder,
        "iterations": int(iterations),
        "latent": {"mean": z.mean.tolist(), "cov_diag": z.cov_diag.tolist()},
        "pose": {
            "t": pose.mean.t.tolist(),
            "phi": pose.mean.phi.tolist(),
            "s": pose.mean.s.tolist(),
            "matrix": pose.mean.to_matrix().tolist(),
            "cov_diag": pose.cov_diag.tolist(),
        },
        "history": [dict(zip(HISTORY_COLUMNS, row)) for row in history],
        "config": asdict(config),
    }
    if ray_bounds is not None:
        center, radius = ray_bounds
        payload["ray_bounds"] = {"center": [float(c) for c in center], "radius": float(radius)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    logger.info("JSON: result after %d iteration(s) → %s", iterations, path)
    return path


def load_result_json(path: PathLike) -> StoredResult:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read result file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        pose = data["pose"]
        bounds = data.get("ray_bounds")
        return StoredResult(
            z=LatentGaussian(data["latent"]["mean"], data["latent"]["cov_diag"]),
            pose=PoseGaussian(Pose9(pose["t"], pose["phi"], pose["s"]), pose["cov_diag"]),
            decoder=data["decoder"],
            iterations=int(data["iterations"]),
            history=[[row[c] for c in HISTORY_COLUMNS] for row in data.get("history", [])],
            config=data.get("config", {}),
            ray_bounds=None if bounds is None else (np.asarray(bounds["center"], dtype=float), float(bounds["radius"])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: missing or malformed field {exc}") from exc


# ── CSV tables ────────────────────────────────────────────────────────────────


def _write_rows(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]], mode: str = "w") -> Path:
    path = Path(path)
    new_file = mode == "w" or not path.exists() or path.stat().st_size == 0
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(header)
        count = 0
        for row in rows:
            writer.writerow(row)
            count += 1
    logger.info("CSV: %d row(s) → %s", count, path)
    return path


def save_history_csv(path: PathLike, history: Sequence[Sequence[float]]) -> Path:
    rows = ([int(r[0])] + [float(v) for v in r[1:]] for r in history)
    return _write_rows(path, HISTORY_COLUMNS, rows)


def append_metrics_csv(path: PathLike, row: Dict[str, Any]) -> Path:
    """Append one object's metrics, writing the header first if the file is new."""
    return _write_rows(path, METRIC_COLUMNS, [[row.get(c, "") for c in METRIC_COLUMNS]], mode="a")


def read_metrics_csv(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in METRIC_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
            return list(reader)
    except OSError as exc:
        raise FormatError(f"cannot read metrics file {path}: {exc}") from exc


def save_scatter_csv(
    path: PathLike, points: np.ndarray, sdf_mean: np.ndarray, sdf_std: np.ndarray, abs_error: np.ndarray
) -> Path:
    rows = (
        [*map(float, p), float(m), float(s), float(e)]
        for p, m, s, e in zip(points, sdf_mean, sdf_std, abs_error)
    )
    return _write_rows(path, SCATTER_COLUMNS, rows)


def save_beta_csv(path: PathLike, rows: Iterable[Sequence[Any]]) -> Path:
    return _write_rows(path, BETA_COLUMNS, rows)


# ── Meshes ────────────────────────────────────────────────────────────────────


def save_obj(path: PathLike, mesh: trimesh.Trimesh) -> Path:
    """ASCII OBJ with ``v`` and ``f`` records only; an empty mesh gives an empty file."""
    path = Path(path)
    if len(mesh.vertices) == 0:
        path.write_text("", encoding="utf-8")
        logger.warning("OBJ: empty mesh → %s", path)
        return path
    text = export_obj(
        mesh, include_normals=False, include_color=False, include_texture=False, header=None
    )
    path.write_text(text, encoding="utf-8")
    logger.info("OBJ: %d vertices, %d faces → %s", len(mesh.vertices), len(mesh.faces), path)
    return path


def load_mesh(path: PathLike) -> trimesh.Trimesh:
    path = Path(path)
    try:
        mesh = trimesh.load(path, force="mesh", process=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read mesh {path}: {exc}") from exc
    if not isinstance(mesh, trimesh.Trimesh) or len(mesh.faces) == 0:
        raise FormatError(f"{path}: no triangles found")
    return mesh


def optional_path(root: Path, value: Optional[str]) -> Optional[Path]:
    """Resolve a manifest entry relative to the manifest directory."""
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else root / p
