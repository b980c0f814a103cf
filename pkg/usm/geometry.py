"""
9-DoF pose representation and its Lie-algebra parametrisation.

A pose is a translation ``t``, an axis-angle rotation ``phi`` and a per-axis
scale ``s``; its matrix is ``[exp(phi^) diag(s) | t]``.  The matrix places the
object in the world: canonical object coordinates map to world coordinates,
so ``s`` is the object's size.  The object-frame query used by the losses is
the inverse map, :func:`to_object_frame`.

Inside the optimiser the pose is the 9-vector ``[t, phi, log s]`` so scale
stays positive without constraints; every Jacobian in this module is taken
with respect to that internal vector unless stated otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import FormatError, InvalidInputError

_TAYLOR_EXP = 1e-8   # below this angle Rodrigues falls back to its series
_TAYLOR_JAC = 1e-4   # (theta - sin theta) / theta^3 cancels badly well above 1e-8


# ── SO(3) helpers ─────────────────────────────────────────────────────────────


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of *v* (or a stack of them for shape ``(..., 3)``)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues' formula ``exp(phi^)``."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _TAYLOR_EXP:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3) at *phi*."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _TAYLOR_JAC:
        b = 0.5 - theta**2 / 24.0
        c = 1.0 / 6.0 - theta**2 / 120.0
    else:
        b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
        c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * K + c * (K @ K)


def wrap_rotation(phi: np.ndarray) -> np.ndarray:
    """Return the equivalent axis-angle vector with norm <= pi."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    if theta <= np.pi:
        return phi.copy()
    wrapped = theta % (2.0 * np.pi)
    if wrapped > np.pi:
        wrapped -= 2.0 * np.pi
    return phi * (wrapped / theta)


# ── Pose types ────────────────────────────────────────────────────────────────


@dataclass
class Pose9:
    """Translation (m), axis-angle rotation (rad) and positive per-axis scale."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.phi = np.asarray(self.phi, dtype=float).reshape(3)
        self.s = np.asarray(self.s, dtype=float).reshape(3)
        if not np.all(self.s > 0):
            raise InvalidInputError(f"pose scale must be strictly positive, got {self.s}")

    @classmethod
    def identity(cls) -> "Pose9":
        return cls()

    # Public vector keeps raw scale: [t, phi, s]
    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.phi, self.s])

    @classmethod
    def from_vector(cls, xi: Sequence[float]) -> "Pose9":
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (9,):
            raise InvalidInputError(f"pose vector must have 9 entries, got shape {xi.shape}")
        return cls(xi[0:3], xi[3:6], xi[6:9])

    # Optimiser parametrisation: [t, phi, log s]
    def to_internal(self) -> np.ndarray:
        return np.concatenate([self.t, self.phi, np.log(self.s)])

    @classmethod
    def from_internal(cls, xi: Sequence[float]) -> "Pose9":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[0:3], xi[3:6], np.exp(xi[6:9]))

    def rotation(self) -> np.ndarray:
        return so3_exp(self.phi)

    def to_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation() * self.s[None, :]
        T[:3, 3] = self.t
        return T


@dataclass
class PoseGaussian:
    """Pose mean plus diagonal covariance over the internal 9-vector ``[t, phi, log s]``."""

    mean: Pose9
    cov_diag: np.ndarray

    def __post_init__(self) -> None:
        self.cov_diag = np.asarray(self.cov_diag, dtype=float).reshape(9)
        if np.any(self.cov_diag < 0):
            raise InvalidInputError("pose covariance diagonal must be non-negative")


def exp_pose(xi: Sequence[float]) -> np.ndarray:
    """Matrix of the pose vector ``[t, phi, s]`` (raw scale)."""
    return Pose9.from_vector(xi).to_matrix()


def log_pose(T: np.ndarray) -> Pose9:
    """Decompose ``[R diag(s) | t]`` back into a :class:`Pose9`."""
    T = np.asarray(T, dtype=float)
    M = T[:3, :3]
    s = np.linalg.norm(M, axis=0)
    if np.any(s <= 0):
        raise InvalidInputError("matrix has a zero-length column; not a 9-DoF pose")
    R = M / s[None, :]
    phi = Rotation.from_matrix(R).as_rotvec()
    return Pose9(T[:3, 3], phi, s)


# ── Point maps ────────────────────────────────────────────────────────────────


def transform_point(pose: Pose9, p: np.ndarray) -> np.ndarray:
    """Homogeneous product ``to_matrix(pose) · p`` for one point or an ``(N, 3)`` stack."""
    p = np.asarray(p, dtype=float)
    T = pose.to_matrix()
    return p @ T[:3, :3].T + T[:3, 3]


def to_object_frame(pose: Pose9, p_w: np.ndarray) -> np.ndarray:
    """World point(s) expressed in the object's canonical frame: ``diag(1/s) Rᵀ (p_w - t)``."""
    p_w = np.asarray(p_w, dtype=float)
    R = pose.rotation()
    return ((p_w - pose.t) @ R) / pose.s


def point_pose_jacobian(pose: Pose9, p_w: np.ndarray, log_scale: bool = True) -> np.ndarray:
    """
    Derivative of :func:`to_object_frame` with respect to the pose parameters.

    This is the Jacobian of the world-to-object map, the inverse of
    :func:`transform_point`, so its translation and scale columns carry the
    opposite sign to the forward map's: ``-diag(1/s) Rᵀ`` and, per raw scale, ``-p_o / s``.

    Columns are ordered ``[t, phi, scale]``.  With ``log_scale=True`` (the
    optimiser parametrisation) the scale columns are ``∂p_o/∂log s``;
    otherwise they are ``∂p_o/∂s``.

    Returns:
        ``(3, 9)`` for a single point, ``(N, 3, 9)`` for a stack.
    """
    p_w = np.asarray(p_w, dtype=float)
    single = p_w.ndim == 1
    pts = p_w.reshape(-1, 3)
    R = pose.rotation()
    inv_s = 1.0 / pose.s
    w = pts - pose.t
    p_o = (w @ R) * inv_s

    J = np.zeros((pts.shape[0], 3, 9))
    SRt = inv_s[:, None] * R.T
    J[:, :, 0:3] = -SRt
    J[:, :, 3:6] = SRt @ hat(w) @ so3_left_jacobian(pose.phi)
    scale_cols = -p_o if log_scale else -p_o * inv_s
    idx = np.arange(3)
    J[:, idx, 6 + idx] = scale_cols
    return J[0] if single else J


def rigid_inverse(T: np.ndarray) -> np.ndarray:
    """Inverse of a rigid 4×4 transform."""
    T = np.asarray(T, dtype=float)
    out = np.eye(4)
    out[:3, :3] = T[:3, :3].T
    out[:3, 3] = -T[:3, :3].T @ T[:3, 3]
    return out


def look_at(eye: np.ndarray, target: np.ndarray, up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world transform (x right, y down, z forward) looking from *eye* at *target*."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    T = np.eye(4)
    T[:3, 0] = right
    T[:3, 1] = down
    T[:3, 2] = forward
    T[:3, 3] = eye
    return T


# ── Text format: 12 decimals, row-major upper 3×4 ─────────────────────────────


def format_pose_text(T: np.ndarray) -> str:
    rows = np.asarray(T, dtype=float)[:3, :4]
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in rows) + "\n"


def parse_pose_text(text: str, source: str = "<pose>") -> np.ndarray:
    fields = text.split()
    if len(fields) != 12:
        raise FormatError(f"{source}: pose needs 12 decimals, found {len(fields)}")
    try:
        values = np.array([float(v) for v in fields])
    except ValueError as exc:
        raise FormatError(f"{source}: non-numeric pose entry ({exc})") from exc
    T = np.eye(4)
    T[:3, :4] = values.reshape(3, 4)
    return T


# ── Differentiable (torch) counterparts ───────────────────────────────────────


def _hat_t(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[0])
    return torch.stack([
        torch.stack([zero, -v[2], v[1]]),
        torch.stack([v[2], zero, -v[0]]),
        torch.stack([-v[1], v[0], zero]),
    ])


def so3_exp_t(phi: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula with gradients that stay finite at ``phi = 0``."""
    theta_sq = torch.dot(phi, phi)
    small = theta_sq < _TAYLOR_EXP**2
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta_sq), theta_sq))
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, 2.0 * torch.sin(0.5 * theta) ** 2 / theta**2)
    K = _hat_t(phi)
    eye = torch.eye(3, dtype=phi.dtype)
    return eye + a * K + b * (K @ K)


def to_object_frame_t(pose_xi: torch.Tensor, p_w: torch.Tensor) -> torch.Tensor:
    """:func:`to_object_frame` on the internal vector ``[t, phi, log s]``; ``p_w`` is ``(N, 3)``."""
    t, phi, log_s = pose_xi[0:3], pose_xi[3:6], pose_xi[6:9]
    R = so3_exp_t(phi)
    return ((p_w - t) @ R) / torch.exp(log_s)
