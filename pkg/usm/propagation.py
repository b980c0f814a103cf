"""
First-order propagation of latent and pose Gaussians to per-point SDF Gaussians.

The SDF mean is the decoder evaluated at the means; the variance is
``J_z Σ_z J_zᵀ + J_ξ Σ_ξ J_ξᵀ`` with ``J_ξ = ∂s/∂p_o · ∂p_o/∂ξ``.  Both
covariances are diagonal, so this reduces to weighted sums of squared
Jacobian entries.

The Jacobians are evaluated at the means and detached: gradients reach the
means only through the mean path and reach the covariances linearly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch

from .decoder import DTYPE, LatentGaussian, SdfDecoder
from .geometry import Pose9, PoseGaussian, point_pose_jacobian, to_object_frame_t


@dataclass
class SdfGaussian:
    """SDF mean (m) and variance (m²); scalars for one point, arrays for many."""

    mean: Union[float, np.ndarray]
    var: Union[float, np.ndarray]


def sdf_distribution_t(
    decoder: SdfDecoder,
    z_mean: torch.Tensor,
    z_var: torch.Tensor,
    pose_xi: torch.Tensor,
    pose_var: torch.Tensor,
    p_w: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Differentiable SDF mean and variance for world points ``p_w`` of shape ``(N, 3)``.

    ``pose_xi`` is the internal pose vector ``[t, phi, log s]`` and
    ``pose_var`` the matching diagonal covariance.
    """
    p_o = to_object_frame_t(pose_xi, p_w)
    mean = decoder.sdf_t(z_mean, p_o)

    dz, dp = decoder.jacobians_t(z_mean.detach(), p_o.detach())
    pose = Pose9.from_internal(pose_xi.detach().numpy())
    dpo_dxi = torch.as_tensor(point_pose_jacobian(pose, p_w.detach().numpy()), dtype=DTYPE)
    j_xi = torch.einsum("ni,nij->nj", dp, dpo_dxi)

    var = (dz * dz) @ z_var + (j_xi * j_xi) @ pose_var
    return mean, var


def sdf_distribution(
    decoder: SdfDecoder,
    z: LatentGaussian,
    pose: PoseGaussian,
    p_w: np.ndarray,
) -> SdfGaussian:
    """SDF Gaussian at world point(s) ``p_w`` (``(3,)`` or ``(N, 3)``)."""
    p_w = np.asarray(p_w, dtype=float)
    single = p_w.ndim == 1
    with torch.no_grad():
        mean, var = sdf_distribution_t(
            decoder,
            torch.as_tensor(z.mean, dtype=DTYPE),
            torch.as_tensor(z.cov_diag, dtype=DTYPE),
            torch.as_tensor(pose.mean.to_internal(), dtype=DTYPE),
            torch.as_tensor(pose.cov_diag, dtype=DTYPE),
            torch.as_tensor(p_w.reshape(-1, 3), dtype=DTYPE),
        )
    mean_np, var_np = mean.numpy(), var.numpy()
    if single:
        return SdfGaussian(float(mean_np[0]), float(var_np[0]))
    return SdfGaussian(mean_np, var_np)
