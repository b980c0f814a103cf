"""
Energy-score 3D surface loss and the latent regulariser.

Every back-projected object point should sit on the zero level set, so its
propagated SDF Gaussian is scored against the target ``0`` with a
Monte-Carlo energy score::

    ES = 1/M Σ |s_m - target| - 1/(2(M-1)) Σ_{m<M} |s_m - s_{m+1}|

with reparameterised samples ``s_m = μ + σ ε_m`` so the score is
differentiable in ``μ`` and ``σ²``.  Standard normals come from a seeded
generator keyed on ``(seed, *keys)``.  The 3D loss shares one row of ``M``
normals across all points, so it does not depend on point order.
"""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np
import torch

from .config import EsConfig
from .decoder import DTYPE, LatentGaussian, SdfDecoder
from .errors import InvalidInputError
from .geometry import PoseGaussian
from .propagation import sdf_distribution_t


def es_noise(seed: int, rows: int, samples: int, *keys: int) -> np.ndarray:
    """``(rows, samples)`` standard normals from the generator seeded with ``[seed, *keys]``."""
    rng = np.random.default_rng([seed, *keys])
    return rng.standard_normal((rows, samples))


def energy_score_t(
    mu: torch.Tensor,
    var: torch.Tensor,
    target: Union[torch.Tensor, float],
    eps: torch.Tensor,
) -> torch.Tensor:
    """Per-row energy scores for ``mu``/``var`` of shape ``(N,)`` and noise ``eps`` of shape ``(N, M)`` or a shared ``(1, M)``."""
    positive = var > 0
    std = torch.where(positive, torch.sqrt(torch.where(positive, var, torch.ones_like(var))), torch.zeros_like(var))
    samples = mu[:, None] + std[:, None] * eps
    if isinstance(target, torch.Tensor):
        target = target[:, None]
    m = eps.shape[1]
    first = (samples - target).abs().mean(dim=1)
    second = (samples[:, 1:] - samples[:, :-1]).abs().sum(dim=1) / (2.0 * (m - 1))
    return first - second


def energy_score_gaussian(mu: float, var: float, target: float, cfg: EsConfig) -> float:
    """Monte-Carlo energy score of ``N(mu, var)`` against a scalar *target*."""
    if var < 0:
        raise InvalidInputError(f"variance must be >= 0, got {var}")
    eps = torch.as_tensor(es_noise(cfg.seed, 1, cfg.sample_count), dtype=DTYPE)
    score = energy_score_t(
        torch.tensor([mu], dtype=DTYPE), torch.tensor([var], dtype=DTYPE), float(target), eps
    )
    return float(score[0])


def loss_3d_t(
    decoder: SdfDecoder,
    z_mean: torch.Tensor,
    z_var: torch.Tensor,
    pose_xi: torch.Tensor,
    pose_var: torch.Tensor,
    points_w: torch.Tensor,
    eps: torch.Tensor,
) -> torch.Tensor:
    """Mean energy score of the points' SDF Gaussians against zero."""
    mean, var = sdf_distribution_t(decoder, z_mean, z_var, pose_xi, pose_var, points_w)
    return energy_score_t(mean, var, 0.0, eps).mean()


def loss_3d(
    decoder: SdfDecoder,
    z: LatentGaussian,
    pose: PoseGaussian,
    points_w: np.ndarray,
    cfg: EsConfig,
    keys: Sequence[int] = (),
) -> float:
    """
    3D surface loss over world points.

    Args:
        keys: Extra generator keys (the optimiser passes its iteration index).

    Raises:
        InvalidInputError: If *points_w* is empty.
    """
    points_w = np.asarray(points_w, dtype=float).reshape(-1, 3)
    if points_w.shape[0] == 0:
        raise InvalidInputError("3D loss needs at least one point")
    eps = es_noise(cfg.seed, 1, cfg.sample_count, *keys)
    with torch.no_grad():
        value = loss_3d_t(
            decoder,
            torch.as_tensor(z.mean, dtype=DTYPE),
            torch.as_tensor(z.cov_diag, dtype=DTYPE),
            torch.as_tensor(pose.mean.to_internal(), dtype=DTYPE),
            torch.as_tensor(pose.cov_diag, dtype=DTYPE),
            torch.as_tensor(points_w, dtype=DTYPE),
            torch.as_tensor(eps, dtype=DTYPE),
        )
    return float(value)


def latent_regularizer(z: LatentGaussian) -> float:
    """Squared norm of the latent mean."""
    return float(np.dot(z.mean, z.mean))
