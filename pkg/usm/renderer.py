"""
Probabilistic differentiable SDF rendering.

Each pixel's ray is sampled at ``𝓜`` uniformly spaced depths.  A sample's
occupancy ``o = sigmoid(-l s)`` is logit-normal when its SDF is Gaussian;
draws of ``o`` come from the logit-normal quantile function evaluated at
scrambled Sobol points, and each draw yields first-hit termination weights

    φ_i = o_i Π_{j<i} (1 - o_j),     φ_escape = Π_j (1 - o_j)

which sum to one by telescoping.  The rendered depth of a draw is
``Σ φ_i d_i + φ_escape · d_background``; the pixel's depth distribution is the
mean and population variance of that quantity over draws.

Samples whose SDF mean lies outside the surface band ``|μ_s| <= δ`` keep a
fixed occupancy ``sigmoid(-l μ_s)``.

Everything on the optimisation path is torch float64 so the 2D loss is
differentiable in the latent and pose means and log-variances; the Sobol
points and ray geometry are constants.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.special import expit, logit, ndtr, ndtri
from scipy.stats import qmc

from .config import EsConfig, RayConfig
from .decoder import DTYPE, LatentGaussian, SdfDecoder
from .errors import InvalidInputError
from .geometry import Pose9, PoseGaussian
from .ingestion import DepthFrame, Intrinsics
from .propagation import SdfGaussian, sdf_distribution_t
from .surface_loss import energy_score_t, es_noise

logger = logging.getLogger(__name__)

_U_CLIP = 1e-12
_BETA_CLAMP = 0.99


# ── Logit-normal occupancy ────────────────────────────────────────────────────


def occupancy_from_sdf(s, l: float):
    """Mirrored sigmoid ``1 / (1 + exp(l s))``."""
    return expit(-l * np.asarray(s, dtype=float))


def _check_open_unit(x: np.ndarray, name: str) -> None:
    if np.any((x <= 0.0) | (x >= 1.0)):
        raise InvalidInputError(f"{name} must lie strictly inside (0, 1)")


def logit_normal_pdf(o, mu_s: float, var_s: float, l: float):
    """Density of ``o = sigmoid(-l s)`` for ``s ~ N(mu_s, var_s)``."""
    o = np.asarray(o, dtype=float)
    _check_open_unit(o, "occupancy")
    if var_s <= 0:
        raise InvalidInputError(f"SDF variance must be > 0, got {var_s}")
    s = -logit(o) / l
    gauss = np.exp(-((s - mu_s) ** 2) / (2.0 * var_s)) / np.sqrt(2.0 * np.pi * var_s)
    return gauss / (l * o * (1.0 - o))


def logit_normal_cdf(o, mu_s: float, var_s: float, l: float):
    """``P(O <= o)``; *o* must lie in ``(0, 1)``."""
    o = np.asarray(o, dtype=float)
    _check_open_unit(o, "occupancy")
    if var_s <= 0:
        raise InvalidInputError(f"SDF variance must be > 0, got {var_s}")
    return ndtr((mu_s + logit(o) / l) / np.sqrt(var_s))


def logit_normal_quantile(u, mu_s: float, var_s: float, l: float):
    """Inverse CDF: ``sigmoid(l σ Φ⁻¹(u) - l μ_s)``."""
    u = np.asarray(u, dtype=float)
    _check_open_unit(u, "quantile level")
    if var_s < 0:
        raise InvalidInputError(f"SDF variance must be >= 0, got {var_s}")
    return expit(l * np.sqrt(var_s) * ndtri(u) - l * mu_s)


def sobol_normals(count: int, dim: int, key: Sequence[int]) -> np.ndarray:
    """
    ``(count, dim)`` standard-normal quantiles of an Owen-scrambled Sobol
    sequence whose scrambling is seeded with *key*.

    The base-2 block is the smallest power of two holding *count* points;
    coordinates are clipped away from 0 and 1 before ``Φ⁻¹``.
    """
    engine = qmc.Sobol(d=dim, scramble=True, seed=np.random.default_rng(list(key)))
    m = max(0, int(np.ceil(np.log2(count))))
    u = engine.random_base2(m)[:count]
    return ndtri(np.clip(u, _U_CLIP, 1.0 - _U_CLIP))


def occupancy_draws_t(
    mu: torch.Tensor, var: torch.Tensor, normals: torch.Tensor, cfg: RayConfig
) -> torch.Tensor:
    """Occupancy draws ``(..., K, 𝓜)`` for SDF moments ``(..., 𝓜)`` and normals ``(..., K, 𝓜)``."""
    sigma = torch.sqrt(torch.clamp(var, min=cfg.var_floor))
    in_band = mu.detach().abs() <= cfg.surface_band
    drawn = torch.sigmoid(cfg.slope * (sigma[..., None, :] * normals - mu[..., None, :]))
    fixed = torch.sigmoid(-cfg.slope * mu)[..., None, :]
    return torch.where(in_band[..., None, :], drawn, fixed)


# ── Termination weights and depth ─────────────────────────────────────────────


def termination_weights_t(occ: torch.Tensor) -> torch.Tensor:
    """First-hit weights ``(..., 𝓜 + 1)`` from occupancies ``(..., 𝓜)``; the last entry is escape."""
    transmit = torch.cumprod(1.0 - occ, dim=-1)
    before = torch.cat([torch.ones_like(occ[..., :1]), transmit[..., :-1]], dim=-1)
    return torch.cat([occ * before, transmit[..., -1:]], dim=-1)


def depth_from_weights_t(
    weights: torch.Tensor, depths: torch.Tensor, background: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean and population variance over draws of ``Σ φ_i d_i + φ_escape · background``."""
    per_draw = (weights[..., :-1] * depths[..., None, :]).sum(-1) + weights[..., -1] * background[..., None]
    mean = per_draw.mean(-1)
    var = ((per_draw - mean[..., None]) ** 2).mean(-1)
    return mean, var


def termination_from_draws(occupancies: np.ndarray) -> np.ndarray:
    """Per-draw termination weights for an occupancy matrix ``(K, 𝓜)``."""
    occ = torch.as_tensor(np.atleast_2d(np.asarray(occupancies, dtype=float)), dtype=DTYPE)
    return termination_weights_t(occ).numpy()


def depth_from_weights(weights: np.ndarray, depths: np.ndarray, background: float) -> Tuple[float, float]:
    """Depth mean and variance from per-draw weights ``(K, 𝓜 + 1)`` and sample depths ``(𝓜,)``."""
    mean, var = depth_from_weights_t(
        torch.as_tensor(np.atleast_2d(weights), dtype=DTYPE),
        torch.as_tensor(np.asarray(depths, dtype=float), dtype=DTYPE),
        torch.tensor(float(background), dtype=DTYPE),
    )
    return float(mean), float(var)


@dataclass
class TerminationStats:
    mean: np.ndarray     # (𝓜 + 1,)
    var: np.ndarray      # (𝓜 + 1,)
    weights: np.ndarray  # (K, 𝓜 + 1), one row per Sobol draw


def termination_distributions(
    sdf_gaussians: Sequence[SdfGaussian],
    cfg: RayConfig,
    key: Sequence[int] = (0,),
) -> TerminationStats:
    """
    Termination and escape moments for one ray from its per-sample SDF Gaussians.

    Raises:
        InvalidInputError: If *sdf_gaussians* is empty.
    """
    if len(sdf_gaussians) == 0:
        raise InvalidInputError("a ray needs at least one sample")
    mu = torch.tensor([float(g.mean) for g in sdf_gaussians], dtype=DTYPE)
    var = torch.tensor([float(g.var) for g in sdf_gaussians], dtype=DTYPE)
    normals = torch.as_tensor(sobol_normals(cfg.sobol_count, mu.shape[0], key), dtype=DTYPE)
    weights = termination_weights_t(occupancy_draws_t(mu, var, normals, cfg)).numpy()
    return TerminationStats(weights.mean(axis=0), weights.var(axis=0), weights)


# ── Beta moment matching ──────────────────────────────────────────────────────


@dataclass
class BetaFit:
    alpha: float
    beta: float
    clamped: bool = False
    degenerate: bool = False


def beta_moment_match(mean: float, var: float) -> BetaFit:
    """
    Beta distribution with the given mean and variance.

    Variances at or above ``mean (1 - mean)`` are clamped to 0.99 of that
    bound and flagged.  Means at 0 or 1, or a zero variance, give a
    degenerate fit with NaN parameters.
    """
    if not 0.0 <= mean <= 1.0:
        raise InvalidInputError(f"Beta mean must lie in [0, 1], got {mean}")
    if mean in (0.0, 1.0) or var <= 0.0:
        return BetaFit(float("nan"), float("nan"), degenerate=True)
    bound = mean * (1.0 - mean)
    clamped = var >= bound
    if clamped:
        logger.debug("Beta variance %.3g exceeds mean(1-mean)=%.3g; clamping.", var, bound)
        var = _BETA_CLAMP * bound
    k = bound / var - 1.0
    return BetaFit(mean * k, (1.0 - mean) * k, clamped=clamped)


# ── Rays ──────────────────────────────────────────────────────────────────────


@dataclass
class RayBounds:
    """World-frame bounding sphere that limits each ray's sampled depth range."""

    center: np.ndarray
    radius: float

    @classmethod
    def around(
        cls, pose: Pose9, decoder: SdfDecoder, padding: float = 0.1, z: Optional[np.ndarray] = None
    ) -> "RayBounds":
        extent = decoder.bound_radius if z is None else decoder.canonical_extent(z)
        return cls(pose.t.copy(), extent * float(np.max(pose.s)) * (1.0 + padding))


def _camera_directions(pixels: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    u = pixels[:, 0].astype(float)
    v = pixels[:, 1].astype(float)
    return np.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)],
        axis=1,
    )


def ray_depth_range(
    origin: np.ndarray, direction: np.ndarray, bounds: RayBounds
) -> Optional[Tuple[float, float]]:
    """Depth interval where ``origin + d · direction`` lies inside *bounds*, or ``None`` on a miss."""
    offset = np.asarray(origin, dtype=float) - bounds.center
    direction = np.asarray(direction, dtype=float)
    a = float(direction @ direction)
    b = 2.0 * float(direction @ offset)
    c = float(offset @ offset) - bounds.radius**2
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    root = np.sqrt(disc)
    near = (-b - root) / (2.0 * a)
    far = (-b + root) / (2.0 * a)
    near = max(near, 1e-6)
    if far <= near:
        return None
    return near, far


def _check_pixels(pixels: np.ndarray, intrinsics: Intrinsics) -> None:
    u, v = pixels[:, 0], pixels[:, 1]
    inside = (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    if not np.all(inside):
        bad = pixels[~inside][0]
        raise InvalidInputError(
            f"pixel ({bad[0]}, {bad[1]}) outside {intrinsics.width}x{intrinsics.height} image"
        )


def ray_sample(
    pixel: Sequence[int],
    intrinsics: Intrinsics,
    T_wc: np.ndarray,
    cfg: RayConfig,
    depth_range: Optional[Tuple[float, float]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample depths ``d_i = d_min + (i/𝓜)(d_max - d_min)``, ``i = 1..𝓜``, and
    the matching world points ``T_wc · (d_i K⁻¹ (u, v, 1))``.
    """
    px = np.asarray(pixel, dtype=int).reshape(1, 2)
    _check_pixels(px, intrinsics)
    d_min, d_max = depth_range if depth_range is not None else (cfg.d_min, cfg.d_max)
    steps = np.arange(1, cfg.samples_per_ray + 1) / cfg.samples_per_ray
    depths = d_min + steps * (d_max - d_min)
    T_wc = np.asarray(T_wc, dtype=float)
    direction_w = T_wc[:3, :3] @ _camera_directions(px, intrinsics)[0]
    points = T_wc[:3, 3] + depths[:, None] * direction_w
    return depths, points


@dataclass
class RayBatch:
    """Constant geometry and Sobol normals for a set of rays from one view."""

    pixels: np.ndarray         # (R, 2) integer (u, v)
    origins: np.ndarray        # (R, 3)
    directions: np.ndarray     # (R, 3), unit camera z
    sample_depths: np.ndarray  # (R, 𝓜)
    background: np.ndarray     # (R,)
    normals: np.ndarray        # (R, K, 𝓜)

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    def sample_points(self) -> np.ndarray:
        return self.origins[:, None, :] + self.sample_depths[..., None] * self.directions[:, None, :]


def build_ray_batch(
    pixels: np.ndarray,
    intrinsics: Intrinsics,
    T_wc: np.ndarray,
    cfg: RayConfig,
    bounds: Optional[RayBounds] = None,
    seed: int = 0,
    view: int = 0,
) -> RayBatch:
    """
    Prepare rays for *pixels* of one view.

    With *bounds* each ray is limited to the bounding sphere and rays missing
    it are dropped; otherwise every ray spans ``[cfg.d_min, cfg.d_max]``.
    Sobol scrambling is keyed on ``(seed, view, v * width + u)``.
    """
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    _check_pixels(pixels, intrinsics)
    T_wc = np.asarray(T_wc, dtype=float)
    directions = _camera_directions(pixels, intrinsics) @ T_wc[:3, :3].T
    origin = T_wc[:3, 3]
    n = pixels.shape[0]

    if bounds is None:
        keep = np.ones(n, dtype=bool)
        near = np.full(n, cfg.d_min)
        far = np.full(n, cfg.d_max)
    else:
        keep = np.zeros(n, dtype=bool)
        near = np.zeros(n)
        far = np.zeros(n)
        for i in range(n):
            span = ray_depth_range(origin, directions[i], bounds)
            if span is not None:
                keep[i] = True
                near[i], far[i] = span
        skipped = n - int(keep.sum())
        if skipped and skipped == n:
            logger.warning("All %d ray(s) of view %d miss the bounding sphere.", n, view)
        elif skipped:
            logger.debug("Skipped %d/%d ray(s) of view %d outside the bounding sphere.", skipped, n, view)

    pixels, directions, near, far = pixels[keep], directions[keep], near[keep], far[keep]
    m = cfg.samples_per_ray
    steps = np.arange(1, m + 1) / m
    sample_depths = near[:, None] + steps[None, :] * (far - near)[:, None]
    if len(pixels):
        normals = np.stack([
            sobol_normals(cfg.sobol_count, m, (seed, view, int(v) * intrinsics.width + int(u)))
            for u, v in pixels
        ])
    else:
        normals = np.zeros((0, cfg.sobol_count, m))
    return RayBatch(
        pixels=pixels,
        origins=np.broadcast_to(origin, directions.shape).copy(),
        directions=directions,
        sample_depths=sample_depths,
        background=cfg.background_depth_factor * far,
        normals=normals,
    )


def render_rays_t(
    decoder: SdfDecoder,
    z_mean: torch.Tensor,
    z_var: torch.Tensor,
    pose_xi: torch.Tensor,
    pose_var: torch.Tensor,
    batch: RayBatch,
    cfg: RayConfig,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Depth mean ``(R,)``, depth variance ``(R,)`` and per-draw weights ``(R, K, 𝓜 + 1)``."""
    r, m = batch.sample_depths.shape
    points = torch.as_tensor(batch.sample_points().reshape(-1, 3), dtype=DTYPE)
    mean_s, var_s = sdf_distribution_t(decoder, z_mean, z_var, pose_xi, pose_var, points)
    occ = occupancy_draws_t(
        mean_s.reshape(r, m), var_s.reshape(r, m), torch.as_tensor(batch.normals, dtype=DTYPE), cfg
    )
    weights = termination_weights_t(occ)
    depth_mean, depth_var = depth_from_weights_t(
        weights,
        torch.as_tensor(batch.sample_depths, dtype=DTYPE),
        torch.as_tensor(batch.background, dtype=DTYPE),
    )
    return depth_mean, depth_var, weights


def _state_tensors(z: LatentGaussian, pose: PoseGaussian) -> Tuple[torch.Tensor, ...]:
    return (
        torch.as_tensor(z.mean, dtype=DTYPE),
        torch.as_tensor(z.cov_diag, dtype=DTYPE),
        torch.as_tensor(pose.mean.to_internal(), dtype=DTYPE),
        torch.as_tensor(pose.cov_diag, dtype=DTYPE),
    )


# ── Rendering entry points ────────────────────────────────────────────────────


@dataclass
class RayRender:
    """Rendered depth distribution of one pixel."""

    pixel: Tuple[int, int]
    sample_depths: np.ndarray     # (𝓜,)
    termination_mean: np.ndarray  # (𝓜 + 1,), last entry is escape
    termination_var: np.ndarray   # (𝓜 + 1,)
    depth_mean: float
    depth_var: float
    background_depth: float
    weights: np.ndarray           # (K, 𝓜 + 1)


def render_pixel(
    decoder: SdfDecoder,
    z: LatentGaussian,
    pose: PoseGaussian,
    pixel: Sequence[int],
    intrinsics: Intrinsics,
    T_wc: np.ndarray,
    cfg: RayConfig,
    bounds: Optional[RayBounds] = None,
    seed: int = 0,
    view: int = 0,
) -> Optional[RayRender]:
    """Depth distribution at *pixel*; ``None`` when the ray misses *bounds*."""
    batch = build_ray_batch(np.asarray([pixel]), intrinsics, T_wc, cfg, bounds, seed, view)
    if len(batch) == 0:
        return None
    with torch.no_grad():
        mean, var, weights = render_rays_t(decoder, *_state_tensors(z, pose), batch, cfg)
    w = weights[0].numpy()
    return RayRender(
        pixel=(int(batch.pixels[0, 0]), int(batch.pixels[0, 1])),
        sample_depths=batch.sample_depths[0],
        termination_mean=w.mean(axis=0),
        termination_var=w.var(axis=0),
        depth_mean=float(mean[0]),
        depth_var=float(var[0]),
        background_depth=float(batch.background[0]),
        weights=w,
    )


@dataclass
class DepthMapRender:
    """Whole-view rendering; pixels whose ray was skipped have ``rendered = False`` and zeros elsewhere."""

    depth: np.ndarray
    std: np.ndarray
    escape_mean: np.ndarray
    escape_var: np.ndarray
    rendered: np.ndarray


def render_depth_map(
    decoder: SdfDecoder,
    z: LatentGaussian,
    pose: PoseGaussian,
    intrinsics: Intrinsics,
    T_wc: np.ndarray,
    cfg: RayConfig,
    bounds: Optional[RayBounds] = None,
    seed: int = 0,
    view: int = 0,
    chunk: int = 1024,
) -> DepthMapRender:
    h, w = intrinsics.height, intrinsics.width
    vv, uu = np.mgrid[0:h, 0:w]
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    out = DepthMapRender(
        depth=np.zeros((h, w)),
        std=np.zeros((h, w)),
        escape_mean=np.zeros((h, w)),
        escape_var=np.zeros((h, w)),
        rendered=np.zeros((h, w), dtype=bool),
    )
    tensors = _state_tensors(z, pose)
    for start in range(0, pixels.shape[0], chunk):
        batch = build_ray_batch(pixels[start:start + chunk], intrinsics, T_wc, cfg, bounds, seed, view)
        if len(batch) == 0:
            continue
        with torch.no_grad():
            mean, var, weights = render_rays_t(decoder, *tensors, batch, cfg)
        u, v = batch.pixels[:, 0], batch.pixels[:, 1]
        escape = weights[..., -1].numpy()
        out.depth[v, u] = mean.numpy()
        out.std[v, u] = np.sqrt(np.maximum(var.numpy(), 0.0))
        out.escape_mean[v, u] = escape.mean(axis=1)
        out.escape_var[v, u] = escape.var(axis=1)
        out.rendered[v, u] = True
    logger.info("Rendered view %d: %d/%d pixel(s).", view, int(out.rendered.sum()), h * w)
    return out


# ── Pixel selection and the 2D loss ───────────────────────────────────────────


def _background_region(mask: np.ndarray, dilation: float = 0.1) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    region = np.zeros_like(mask, dtype=bool)
    if rows.size == 0:
        return region
    h, w = mask.shape
    pad_v = max(1, int(np.ceil(dilation * (rows[-1] - rows[0] + 1))))
    pad_u = max(1, int(np.ceil(dilation * (cols[-1] - cols[0] + 1))))
    region[max(0, rows[0] - pad_v):min(h, rows[-1] + pad_v + 1),
           max(0, cols[0] - pad_u):min(w, cols[-1] + pad_u + 1)] = True
    return region & ~mask


def sample_pixels(frame: DepthFrame, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw up to *count* pixels, half from the object region (mask with valid
    depth) and half from the background ring (mask bounding box dilated by
    10%, minus the mask).

    Returns:
        ``(pixels, is_object)`` with pixels as integer ``(u, v)`` rows.
    """
    obj_v, obj_u = np.nonzero(frame.mask & (frame.depth > 0))
    bg_v, bg_u = np.nonzero(_background_region(frame.mask))
    n_bg = min(count // 2, bg_u.size)
    n_obj = min(count - count // 2, obj_u.size)
    pick_obj = rng.choice(obj_u.size, size=n_obj, replace=False) if n_obj else np.zeros(0, dtype=int)
    pick_bg = rng.choice(bg_u.size, size=n_bg, replace=False) if n_bg else np.zeros(0, dtype=int)
    pixels = np.concatenate([
        np.stack([obj_u[pick_obj], obj_v[pick_obj]], axis=1),
        np.stack([bg_u[pick_bg], bg_v[pick_bg]], axis=1),
    ]).astype(int)
    is_object = np.concatenate([np.ones(n_obj, dtype=bool), np.zeros(n_bg, dtype=bool)])
    return pixels, is_object


def pixel_targets(frame: DepthFrame, batch: RayBatch) -> np.ndarray:
    """Measured depth for object pixels, the ray's background depth elsewhere."""
    u, v = batch.pixels[:, 0], batch.pixels[:, 1]
    measured = frame.depth[v, u]
    on_object = frame.mask[v, u] & (measured > 0)
    return np.where(on_object, measured, batch.background)


def loss_2d_t(
    decoder: SdfDecoder,
    z_mean: torch.Tensor,
    z_var: torch.Tensor,
    pose_xi: torch.Tensor,
    pose_var: torch.Tensor,
    batch: RayBatch,
    targets: np.ndarray,
    eps: np.ndarray,
    cfg: RayConfig,
) -> torch.Tensor:
    """Mean energy score of rendered depth Gaussians against *targets*."""
    depth_mean, depth_var, _ = render_rays_t(decoder, z_mean, z_var, pose_xi, pose_var, batch, cfg)
    scores = energy_score_t(
        depth_mean,
        depth_var,
        torch.as_tensor(targets, dtype=DTYPE),
        torch.as_tensor(eps, dtype=DTYPE),
    )
    return scores.mean()


def loss_2d(
    decoder: SdfDecoder,
    z: LatentGaussian,
    pose: PoseGaussian,
    frame: DepthFrame,
    pixel_set: np.ndarray,
    cfg: RayConfig,
    es_cfg: EsConfig,
    bounds: Optional[RayBounds] = None,
    seed: int = 0,
    view: int = 0,
    keys: Sequence[int] = (),
) -> float:
    """
    2D rendering loss over *pixel_set* of one frame.

    Rays that miss *bounds* are left out of the mean; when every ray misses
    the loss is 0.

    Raises:
        InvalidInputError: If *pixel_set* is empty.
    """
    pixel_set = np.asarray(pixel_set, dtype=int).reshape(-1, 2)
    if pixel_set.shape[0] == 0:
        raise InvalidInputError("2D loss needs at least one pixel")
    batch = build_ray_batch(pixel_set, frame.intrinsics, frame.T_wc, cfg, bounds, seed, view)
    if len(batch) == 0:
        return 0.0
    eps = es_noise(es_cfg.seed, len(batch), es_cfg.sample_count, *keys)
    with torch.no_grad():
        value = loss_2d_t(decoder, *_state_tensors(z, pose), batch, pixel_targets(frame, batch), eps, cfg)
    return float(value)
