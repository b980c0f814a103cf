"""
Synthetic multi-view scenes rendered by sphere tracing a decoder.

Cameras sit on a ring around the object centre, equally spaced in azimuth at
a fixed elevation, all looking at the centre.  Each view yields a PFM depth
raster (camera z, meters), a PGM mask of hit pixels, intrinsics and pose text,
and the scene manifest records the ground truth used to render it.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .config import SynthConfig
from .decoder import SdfDecoder, decode
from .errors import InvalidInputError
from .geometry import Pose9, format_pose_text, look_at, to_object_frame
from .ingestion import MANIFEST_NAME, Intrinsics
from .storage import write_pfm, write_pgm

logger = logging.getLogger(__name__)

HIT_TOL = 1e-5
MAX_STEPS = 512


@dataclass
class SynthSpec:
    """Ground truth plus camera ring and sensor settings."""

    gt_latent: np.ndarray
    gt_pose: Pose9 = field(default_factory=Pose9)
    views: int = 3
    radius: float = 3.0
    elevation_deg: float = 20.0
    width: int = 128
    height: int = 128
    focal: float = 128.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.gt_latent = np.asarray(self.gt_latent, dtype=float).reshape(-1)
        if self.views < 1:
            raise InvalidInputError(f"need at least one view, got {self.views}")
        if self.noise < 0:
            raise InvalidInputError(f"depth noise must be >= 0, got {self.noise}")

    @classmethod
    def from_config(cls, cfg: SynthConfig, gt_latent: np.ndarray, gt_pose: Optional[Pose9] = None) -> "SynthSpec":
        return cls(
            gt_latent=gt_latent,
            gt_pose=gt_pose or Pose9(),
            views=cfg.views,
            radius=cfg.radius,
            elevation_deg=cfg.elevation_deg,
            width=cfg.width,
            height=cfg.height,
            focal=cfg.focal,
            noise=cfg.noise,
            seed=cfg.seed,
        )

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0, self.width, self.height)


# ── Sphere tracing ────────────────────────────────────────────────────────────


def sphere_trace_rays(
    decoder: SdfDecoder,
    z: np.ndarray,
    pose: Pose9,
    origins: np.ndarray,
    directions: np.ndarray,
    max_t: float,
) -> np.ndarray:
    """
    Distances along unit *directions* to the posed zero level set; NaN marks
    a miss.  Canonical SDF steps are scaled by ``min(pose.s)`` so a step never
    exceeds the world-frame distance bound.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    n = origins.shape[0]
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    step_scale = float(np.min(pose.s))

    for _ in range(MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p_w = origins[idx] + t[idx, None] * directions[idx]
        s = np.atleast_1d(decode(decoder, z, to_object_frame(pose, p_w)))
        done = np.abs(s) < HIT_TOL
        hit[idx[done]] = True
        active[idx[done]] = False
        moving = idx[~done]
        t[moving] += s[~done] * step_scale
        active[moving[t[moving] > max_t]] = False
    return np.where(hit, t, np.nan)


def sphere_trace(
    decoder: SdfDecoder,
    z: np.ndarray,
    pose: Pose9,
    origin: np.ndarray,
    direction: np.ndarray,
    max_t: float,
) -> Optional[float]:
    """Hit distance along a unit *direction*, or ``None`` on a miss."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise InvalidInputError("ray direction must be normalised")
    t = sphere_trace_rays(decoder, z, pose, np.asarray(origin)[None], direction[None], max_t)[0]
    return None if np.isnan(t) else float(t)


def camera_ring(spec: SynthSpec) -> List[np.ndarray]:
    """Camera-to-world transforms for the ring around ``spec.gt_pose.t``."""
    centre = spec.gt_pose.t
    elev = np.radians(spec.elevation_deg)
    poses = []
    for k in range(spec.views):
        az = 2.0 * np.pi * k / spec.views
        eye = centre + spec.radius * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        poses.append(look_at(eye, centre))
    return poses


def render_view(
    decoder: SdfDecoder,
    z: np.ndarray,
    pose: Pose9,
    intrinsics: Intrinsics,
    T_wc: np.ndarray,
    max_t: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free camera-z depth (0 on misses) and hit mask for one view."""
    vv, uu = np.mgrid[0:intrinsics.height, 0:intrinsics.width]
    rays_c = np.stack(
        [(uu.ravel() - intrinsics.cx) / intrinsics.fx, (vv.ravel() - intrinsics.cy) / intrinsics.fy,
         np.ones(uu.size)],
        axis=1,
    )
    lengths = np.linalg.norm(rays_c, axis=1)
    directions = (rays_c / lengths[:, None]) @ T_wc[:3, :3].T
    origins = np.broadcast_to(T_wc[:3, 3], directions.shape)
    t = sphere_trace_rays(decoder, z, pose, origins, directions, max_t)
    hit = ~np.isnan(t)
    depth = np.where(hit, np.nan_to_num(t) / lengths, 0.0)
    shape = (intrinsics.height, intrinsics.width)
    return depth.reshape(shape), hit.reshape(shape)


# ── Scene writer ──────────────────────────────────────────────────────────────


def generate_scene(
    decoder: SdfDecoder,
    spec: SynthSpec,
    out_dir: Union[str, Path],
    decoder_selector: str = "analytic",
) -> Path:
    """
    Render *spec* and write the scene into *out_dir*.

    Depth noise is i.i.d. Gaussian on hit pixels, drawn from a generator
    seeded with ``spec.seed``; masks are never perturbed.

    Returns:
        Path of the written manifest.
    """
    if spec.gt_latent.shape != (decoder.latent_dim,):
        raise InvalidInputError(
            f"ground-truth latent has {spec.gt_latent.size} entries, decoder expects {decoder.latent_dim}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    intrinsics = spec.intrinsics()
    rng = np.random.default_rng(spec.seed)
    max_t = 2.0 * spec.radius + decoder.bound_radius * float(np.max(spec.gt_pose.s))

    frames = []
    for k, T_wc in enumerate(camera_ring(spec)):
        depth, mask = render_view(decoder, spec.gt_latent, spec.gt_pose, intrinsics, T_wc, max_t)
        if spec.noise > 0:
            depth[mask] += rng.normal(0.0, spec.noise, size=int(mask.sum()))
        stem = f"view_{k:03d}"
        write_pfm(out / f"{stem}_depth.pfm", depth)
        write_pgm(out / f"{stem}_mask.pgm", mask)
        (out / f"{stem}_intrinsics.txt").write_text(intrinsics.to_text(), encoding="utf-8")
        (out / f"{stem}_pose.txt").write_text(format_pose_text(T_wc), encoding="utf-8")
        frames.append({
            "depth": f"{stem}_depth.pfm",
            "mask": f"{stem}_mask.pgm",
            "intrinsics": f"{stem}_intrinsics.txt",
            "pose": f"{stem}_pose.txt",
        })
        logger.info("View %d: %d object pixel(s).", k, int(mask.sum()))

    (out / "gt_pose.txt").write_text(format_pose_text(spec.gt_pose.to_matrix()), encoding="utf-8")
    manifest = {
        "version": 1,
        "frames": frames,
        "ground_truth": {
            "pose": "gt_pose.txt",
            "latent": spec.gt_latent.tolist(),
            "decoder": decoder_selector,
            "mesh": None,
        },
    }
    path = out / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    logger.info("Scene with %d view(s) → %s", spec.views, path)
    return path
