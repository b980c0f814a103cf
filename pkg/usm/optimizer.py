"""
Joint shape and pose optimisation.

The optimised state is one flat vector::

    [μ_z (D), log diag Σ_z (D), t (3), φ (3), log s (3), log diag Σ_ξ (9)]

minimised with a single Adam instance over

    L = λ_s L_3D + λ_r L_2D + λ_c ‖μ_z‖²

Randomness is drawn per iteration from generators keyed on
``(seed, iteration, stream)``: stream 0 feeds the 3D energy score and stream
``1 + view`` feeds that view's pixel draw and 2D energy score.  A fit is
therefore a pure function of its inputs, configuration and seed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .config import OptimConfig
from .decoder import DTYPE, LatentGaussian, SdfDecoder, sample_surface_points
from .errors import InitializationError, InvalidInputError, NumericalAbortError
from .geometry import Pose9, PoseGaussian, wrap_rotation
from .ingestion import DepthFrame, assemble_world_points
from .renderer import RayBatch, RayBounds, build_ray_batch, pixel_targets, render_rays_t, sample_pixels
from .surface_loss import energy_score_t, es_noise, loss_3d_t

logger = logging.getLogger(__name__)

_RANK_TOL = 1e-9
_LOG_EVERY = 20


# ── State ─────────────────────────────────────────────────────────────────────


@dataclass
class LossTerms:
    l3d: float
    l2d: float
    reg: float
    total: float

    def row(self, iteration: int) -> List[float]:
        return [iteration, self.l3d, self.l2d, self.reg, self.total]


@dataclass
class OptimState:
    """Latent and pose Gaussians plus the per-iteration ``[iter, L3D, L2D, reg, total]`` history."""

    z: LatentGaussian
    pose: PoseGaussian
    iteration: int = 0
    history: List[List[float]] = field(default_factory=list)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            self.z.mean,
            np.log(self.z.cov_diag),
            self.pose.mean.to_internal(),
            np.log(self.pose.cov_diag),
        ])

    @classmethod
    def from_vector(
        cls,
        vec: np.ndarray,
        latent_dim: int,
        iteration: int = 0,
        history: Optional[List[List[float]]] = None,
    ) -> "OptimState":
        d = latent_dim
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * d + 18,):
            raise InvalidInputError(f"state vector must have {2 * d + 18} entries, got {vec.shape}")
        return cls(
            z=LatentGaussian(vec[:d], np.exp(vec[d:2 * d])),
            pose=PoseGaussian(Pose9.from_internal(vec[2 * d:2 * d + 9]), np.exp(vec[2 * d + 9:])),
            iteration=iteration,
            history=list(history or []),
        )


def _split_t(params: torch.Tensor, d: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    return (
        params[:d],
        torch.exp(params[d:2 * d]),
        params[2 * d:2 * d + 9],
        torch.exp(params[2 * d + 9:]),
    )


# ── Initialisation ────────────────────────────────────────────────────────────


def _check_rank(points: np.ndarray, what: str) -> None:
    centred = points - points.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] <= 0 or sv[-1] / sv[0] < _RANK_TOL:
        raise InitializationError(f"{what} point set is degenerate (rank < 3)")


def _similarity(source: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Least-squares ``target ≈ k R source + t`` (Umeyama)."""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    xs, xt = source - mu_s, target - mu_t
    U, D, Vt = np.linalg.svd(xt.T @ xs / source.shape[0])
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    k = float(np.trace(np.diag(D) @ S) / np.mean(np.sum(xs * xs, axis=1)))
    return k, R, mu_t - k * R @ mu_s


def _one_sided_extent(points: np.ndarray) -> np.ndarray:
    return np.maximum(points.max(axis=0), -points.min(axis=0))


def icp_init(
    canonical_points: np.ndarray,
    observed_points_w: np.ndarray,
    max_iters: int = 50,
    passes: int = 5,
    tol: float = 1e-10,
) -> Pose9:
    """
    Register canonical surface samples to an observed world point cloud.

    Each pass first sets the per-axis scale from extent ratios measured in
    the current object frame (the larger of the two one-sided extents per
    axis, so a partially seen side does not shrink the estimate), then runs
    ICP: observed points are matched to their nearest posed canonical point
    and a closed-form similarity refines rotation, translation and a uniform
    scale factor.

    Raises:
        InvalidInputError:   Fewer than 10 points in either set.
        InitializationError: Either set is rank deficient.
    """
    canonical = np.asarray(canonical_points, dtype=float).reshape(-1, 3)
    observed = np.asarray(observed_points_w, dtype=float).reshape(-1, 3)
    if canonical.shape[0] < 10 or observed.shape[0] < 10:
        raise InvalidInputError("ICP needs at least 10 canonical and 10 observed points")
    _check_rank(canonical, "canonical")
    _check_rank(observed, "observed")

    canon_extent = _one_sided_extent(canonical)
    R = np.eye(3)
    t = observed.mean(axis=0)
    s = np.ones(3)
    error = np.inf
    for p in range(passes):
        local = ((observed - t) @ R) / s
        s = s * _one_sided_extent(local) / canon_extent
        prev = np.inf
        for _ in range(max_iters):
            posed = (canonical * s) @ R.T + t
            dist, idx = cKDTree(posed).query(observed)
            error = float(np.mean(dist))
            if prev - error < tol:
                break
            prev = error
            k, R, t = _similarity(canonical[idx] * s, observed)
            s = s * k
        logger.debug("ICP pass %d: mean residual %.3g m, scale %s.", p, error, np.round(s, 4))
    phi = wrap_rotation(Rotation.from_matrix(R).as_rotvec())
    pose = Pose9(t, phi, s)
    logger.info("ICP initial pose: t=%s scale=%s residual=%.3g m", np.round(t, 4), np.round(s, 4), error)
    return pose


def init_state(
    decoder: SdfDecoder,
    points_w: np.ndarray,
    cfg: OptimConfig,
    initial_pose: Optional[Pose9] = None,
) -> OptimState:
    """
    Zero latent, covariances at ``cfg.init_cov_z`` / ``cfg.init_cov_pose`` and
    an ICP pose unless *initial_pose* is supplied.
    """
    points_w = np.asarray(points_w, dtype=float).reshape(-1, 3)
    if points_w.shape[0] == 0:
        raise InvalidInputError("cannot initialise from an empty point set")
    d = decoder.latent_dim
    if initial_pose is None:
        canonical = sample_surface_points(decoder, np.zeros(d), seed=cfg.seed)
        initial_pose = icp_init(canonical, points_w, cfg.icp_iters)
    return OptimState(
        z=LatentGaussian(np.zeros(d), np.full(d, cfg.init_cov_z)),
        pose=PoseGaussian(initial_pose, np.full(9, cfg.init_cov_pose)),
    )


# ── Loss ──────────────────────────────────────────────────────────────────────


@dataclass
class IterationDraw:
    """Random inputs of one iteration, shared by every evaluation at that iteration."""

    eps_3d: np.ndarray
    batches: List[RayBatch]
    targets: List[np.ndarray]
    eps_2d: List[np.ndarray]


class LossProblem:
    """
    Total loss over fixed frames and world points.

    Separating :meth:`draw` from :meth:`evaluate` lets callers evaluate the
    loss at several parameter vectors with identical randomness.
    """

    def __init__(
        self,
        decoder: SdfDecoder,
        frames: Sequence[DepthFrame],
        points_w: np.ndarray,
        cfg: OptimConfig,
        bounds: Optional[RayBounds] = None,
    ) -> None:
        self.decoder = decoder
        self.frames = list(frames)
        self.points_w = torch.as_tensor(np.asarray(points_w, dtype=float).reshape(-1, 3), dtype=DTYPE)
        self.cfg = cfg
        self.bounds = bounds

    def draw(self, iteration: int) -> IterationDraw:
        cfg = self.cfg
        m = cfg.es.sample_count
        eps_3d = es_noise(cfg.es.seed, 1, m, cfg.seed, iteration, 0)
        batches, targets, eps_2d = [], [], []
        if cfg.lambda_r > 0:
            for view, frame in enumerate(self.frames):
                rng = np.random.default_rng([cfg.seed, iteration, 1 + view])
                pixels, _ = sample_pixels(frame, cfg.ray.pixels_per_view, rng)
                if pixels.shape[0] == 0:
                    continue
                batch = build_ray_batch(pixels, frame.intrinsics, frame.T_wc, cfg.ray, self.bounds, cfg.seed, view)
                if len(batch) == 0:
                    continue
                batches.append(batch)
                targets.append(pixel_targets(frame, batch))
                eps_2d.append(es_noise(cfg.es.seed, len(batch), m, cfg.seed, iteration, 1 + view))
        return IterationDraw(eps_3d, batches, targets, eps_2d)

    def evaluate(self, params: torch.Tensor, draw: IterationDraw) -> Dict[str, torch.Tensor]:
        cfg = self.cfg
        z_mean, z_var, pose_xi, pose_var = _split_t(params, self.decoder.latent_dim)
        zero = params.sum() * 0.0

        l3d = zero
        if cfg.lambda_s > 0:
            l3d = loss_3d_t(
                self.decoder, z_mean, z_var, pose_xi, pose_var, self.points_w,
                torch.as_tensor(draw.eps_3d, dtype=DTYPE),
            )

        l2d = zero
        if draw.batches:
            scores = []
            for batch, target, eps in zip(draw.batches, draw.targets, draw.eps_2d):
                mean, var, _ = render_rays_t(self.decoder, z_mean, z_var, pose_xi, pose_var, batch, cfg.ray)
                scores.append(
                    energy_score_t(
                        mean, var, torch.as_tensor(target, dtype=DTYPE), torch.as_tensor(eps, dtype=DTYPE)
                    )
                )
            l2d = torch.cat(scores).mean()

        reg = (z_mean * z_mean).sum()
        total = cfg.lambda_s * l3d + cfg.lambda_r * l2d + cfg.lambda_c * reg
        return {"L3D": l3d, "L2D": l2d, "reg": reg, "total": total}

    def value_and_grad(self, vec: np.ndarray, draw: IterationDraw, iteration: int = 0) -> Tuple[LossTerms, np.ndarray]:
        params = torch.tensor(np.asarray(vec, dtype=float), dtype=DTYPE, requires_grad=True)
        terms = self.evaluate(params, draw)
        for name, value in terms.items():
            if not torch.isfinite(value):
                raise NumericalAbortError(name, iteration, f"value {float(value)}")
        if terms["total"].requires_grad:
            (grad,) = torch.autograd.grad(terms["total"], params, allow_unused=True)
        else:
            grad = None
        grad_np = np.zeros_like(vec, dtype=float) if grad is None else grad.numpy()
        if not np.all(np.isfinite(grad_np)):
            raise NumericalAbortError("gradient", iteration)
        values = {k: float(v.detach()) for k, v in terms.items()}
        return LossTerms(values["L3D"], values["L2D"], values["reg"], values["total"]), grad_np


def total_loss(
    state: OptimState,
    decoder: SdfDecoder,
    frames: Sequence[DepthFrame],
    points_w: np.ndarray,
    cfg: OptimConfig,
    iteration: int = 0,
    bounds: Optional[RayBounds] = None,
) -> Tuple[LossTerms, np.ndarray]:
    """
    Weighted loss terms at *state* and the gradient over the flat state vector.

    Rays are bounded by *bounds*, or by the sphere around the state's own pose
    when omitted.
    """
    if bounds is None:
        bounds = RayBounds.around(state.pose.mean, decoder, cfg.ray.bound_padding)
    problem = LossProblem(decoder, frames, points_w, cfg, bounds)
    return problem.value_and_grad(state.to_vector(), problem.draw(iteration), iteration)


# ── Adam ──────────────────────────────────────────────────────────────────────


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamMoments":
        return cls(np.zeros(size), np.zeros(size))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    moments: AdamMoments,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[np.ndarray, AdamMoments]:
    """One bias-corrected Adam update; *t* counts from 1."""
    if t < 1:
        raise InvalidInputError(f"Adam step index must be >= 1, got {t}")
    m = beta1 * moments.m + (1.0 - beta1) * grads
    v = beta2 * moments.v + (1.0 - beta2) * (grads * grads)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamMoments(m, v)


# ── Driver ────────────────────────────────────────────────────────────────────


@dataclass
class FitResult:
    """Fitted and initial states, the world points and the ray bounds used while fitting."""

    state: OptimState
    initial: OptimState
    points_w: np.ndarray
    bounds: RayBounds

    @property
    def history(self) -> List[List[float]]:
        return self.state.history


def fit(
    decoder: SdfDecoder,
    frames: Sequence[DepthFrame],
    cfg: OptimConfig,
    initial_pose: Optional[Pose9] = None,
) -> FitResult:
    """
    Initialise and run ``cfg.iters`` Adam steps.

    Raises:
        InvalidInputError:   No frame has object pixels with valid depth.
        NumericalAbortError: A loss term or the gradient became non-finite.
    """
    if not any(np.any(f.mask & (f.depth > 0)) for f in frames):
        raise InvalidInputError("no frame has object pixels with valid depth")
    points_w = assemble_world_points(frames, cfg.subsample, cfg.seed)
    initial = init_state(decoder, points_w, cfg, initial_pose)
    bounds = RayBounds.around(initial.pose.mean, decoder, cfg.ray.bound_padding)
    if cfg.iters == 0:
        return FitResult(initial, initial, points_w, bounds)

    d = decoder.latent_dim
    problem = LossProblem(decoder, frames, points_w, cfg, bounds)
    vec = initial.to_vector()
    moments = AdamMoments.zeros(vec.size)
    rot = slice(2 * d + 3, 2 * d + 6)
    history: List[List[float]] = []

    for it in range(1, cfg.iters + 1):
        terms, grad = problem.value_and_grad(vec, problem.draw(it), it)
        vec, moments = adam_step(vec, grad, moments, it, cfg.lr)
        vec[rot] = wrap_rotation(vec[rot])
        if not np.all(np.isfinite(vec)) or np.any(np.exp(vec[d:2 * d]) <= 0) or np.any(np.exp(vec[2 * d + 9:]) <= 0):
            raise NumericalAbortError("covariance", it, "state left the valid domain")
        history.append(terms.row(it))
        logger.debug(
            "iter %d: L3D=%.6g L2D=%.6g reg=%.6g total=%.6g", it, terms.l3d, terms.l2d, terms.reg, terms.total
        )
        if it % _LOG_EVERY == 0 or it == cfg.iters:
            logger.info("Iteration %d/%d: total loss %.6g", it, cfg.iters, terms.total)

    state = OptimState.from_vector(vec, d, iteration=cfg.iters, history=history)
    return FitResult(state, initial, points_w, bounds)
