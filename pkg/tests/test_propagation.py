"""
Tests for first-order SDF uncertainty propagation.
"""
from __future__ import annotations

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from usm.decoder import DTYPE, DecoderSpec, LatentGaussian, MlpDecoder, SdfDecoder, decode
from usm.geometry import Pose9, PoseGaussian, transform_point
from usm.propagation import sdf_distribution, sdf_distribution_t


class LinearDecoder(SdfDecoder):
    """``s = aᵀ z`` regardless of the query point."""

    def __init__(self, a: np.ndarray) -> None:
        self.a = torch.as_tensor(a, dtype=DTYPE)
        self.spec = DecoderSpec(kind="linear", latent_dim=len(a))

    def sdf_t(self, z: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        return z @ self.a + 0.0 * p[:, 0]


def _ellipsoid_sdf_samples(z: np.ndarray, xi: np.ndarray, p_w: np.ndarray) -> np.ndarray:
    """Vectorised analytic ellipsoid SDF for stacks of latents and internal pose vectors."""
    R = Rotation.from_rotvec(xi[:, 3:6]).as_matrix()
    p_o = np.einsum("nji,nj->ni", R, p_w - xi[:, 0:3]) / np.exp(xi[:, 6:9])
    r = np.exp(0.5 * z[:, :3])
    k0 = np.linalg.norm(p_o / r, axis=1)
    k1 = np.linalg.norm(p_o / (r * r), axis=1)
    return k0 * (k0 - 1.0) / k1


class TestDeterministicLimit:
    def test_zero_covariance(self, decoder) -> None:
        pose = Pose9([0.1, 0.0, 0.2], [0.1, 0.2, 0.3], [1.2, 0.9, 1.0])
        p = np.array([1.5, -0.3, 0.2])
        g = sdf_distribution(decoder, LatentGaussian.zeros(8), PoseGaussian(pose, np.zeros(9)), p)
        assert g.var == 0.0
        z = np.zeros(8)
        expected = decode(decoder, z, ((p - pose.t) @ pose.rotation()) / pose.s)
        assert g.mean == pytest.approx(expected, abs=1e-14)


class TestClosedForms:
    def test_linear_latent_gaussian(self) -> None:
        a = np.array([0.5, -1.0, 2.0, 0.25])
        v = np.array([0.1, 0.2, 0.3, 0.4])
        g = sdf_distribution(
            LinearDecoder(a),
            LatentGaussian(np.ones(4), v),
            PoseGaussian(Pose9(), np.zeros(9)),
            np.array([0.3, 0.1, 0.2]),
        )
        assert g.mean == pytest.approx(a.sum())
        assert g.var == pytest.approx(float(np.sum(a**2 * v)), rel=1e-14)

    def test_sphere_translation_variance(self, decoder) -> None:
        cov = np.zeros(9)
        cov[0] = 0.01
        g = sdf_distribution(decoder, LatentGaussian.zeros(8), PoseGaussian(Pose9(), cov), np.array([2.0, 0.0, 0.0]))
        assert g.mean == pytest.approx(1.0)
        assert g.var == pytest.approx(0.01, rel=1e-12)

    def test_batch_matches_single(self, decoder) -> None:
        z = LatentGaussian(np.zeros(8), np.full(8, 1e-3))
        pose = PoseGaussian(Pose9(phi=[0.0, 0.0, 0.3]), np.full(9, 1e-3))
        pts = np.array([[1.5, 0.0, 0.0], [0.0, 2.0, 0.5]])
        batch = sdf_distribution(decoder, z, pose, pts)
        for i, p in enumerate(pts):
            single = sdf_distribution(decoder, z, pose, p)
            assert batch.mean[i] == pytest.approx(single.mean)
            assert batch.var[i] == pytest.approx(single.var)


class TestLatentPermutation:
    def test_variance_invariant_under_reordered_latent(self) -> None:
        rng = np.random.default_rng(8)
        d = 5
        W0, b0 = rng.normal(scale=0.5, size=(8, d + 3)), rng.normal(scale=0.5, size=8)
        W1, b1 = rng.normal(scale=0.5, size=(1, 8)), rng.normal(scale=0.5, size=1)
        perm = rng.permutation(d)
        W0_perm = np.concatenate([W0[:, :d][:, perm], W0[:, d:]], axis=1)

        z = LatentGaussian(rng.normal(scale=0.3, size=d), rng.uniform(1e-4, 1e-2, size=d))
        z_perm = LatentGaussian(z.mean[perm], z.cov_diag[perm])
        pose = PoseGaussian(Pose9([0.1, -0.2, 0.0], [0.2, 0.0, -0.1], [1.1, 0.9, 1.0]), np.full(9, 1e-3))
        pts = rng.normal(size=(10, 3))

        a = sdf_distribution(MlpDecoder([(W0, b0), (W1, b1)]), z, pose, pts)
        b = sdf_distribution(MlpDecoder([(W0_perm, b0), (W1, b1)]), z_perm, pose, pts)
        np.testing.assert_allclose(b.mean, a.mean, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(b.var, a.var, rtol=1e-10, atol=1e-15)


class TestMonteCarloOracle:
    def test_matches_sampled_variance(self, decoder) -> None:
        rng = np.random.default_rng(2024)
        n = 50_000
        for _ in range(20):
            z_mean = np.zeros(8)
            z_mean[:3] = rng.normal(scale=0.2, size=3)
            z_var = rng.uniform(1e-6, 1e-4, size=8)
            pose = Pose9(rng.normal(scale=0.3, size=3), rng.normal(scale=0.5, size=3), rng.uniform(0.8, 1.5, size=3))
            pose_var = rng.uniform(1e-6, 1e-4, size=9)
            direction = rng.normal(size=3)
            p_o = rng.uniform(0.6, 1.8) * direction / np.linalg.norm(direction)
            p_w = transform_point(pose, p_o)

            predicted = sdf_distribution(
                decoder, LatentGaussian(z_mean, z_var), PoseGaussian(pose, pose_var), p_w
            ).var

            z_samples = z_mean + rng.standard_normal((n, 8)) * np.sqrt(z_var)
            xi_samples = pose.to_internal() + rng.standard_normal((n, 9)) * np.sqrt(pose_var)
            sampled = np.var(_ellipsoid_sdf_samples(z_samples, xi_samples, p_w))
            assert predicted == pytest.approx(sampled, rel=0.1)


class TestDifferentiablePath:
    def test_gradients_reach_means_and_variances(self, decoder) -> None:
        z_mean = torch.zeros(8, dtype=DTYPE, requires_grad=True)
        z_var = torch.full((8,), 1e-3, dtype=DTYPE, requires_grad=True)
        pose_xi = torch.zeros(9, dtype=DTYPE, requires_grad=True)
        pose_var = torch.full((9,), 1e-3, dtype=DTYPE, requires_grad=True)
        p_w = torch.tensor([[1.5, 0.2, -0.1]], dtype=DTYPE)
        mean, var = sdf_distribution_t(decoder, z_mean, z_var, pose_xi, pose_var, p_w)
        (mean.sum() + var.sum()).backward()
        assert pose_xi.grad is not None and torch.any(pose_xi.grad != 0)
        assert torch.any(z_var.grad != 0)
        assert torch.any(pose_var.grad != 0)
        # variance path is linear in the covariances
        assert z_var.grad[5] == 0.0
