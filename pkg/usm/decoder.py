"""
Latent-conditioned SDF decoders.

Two implementations share the :class:`SdfDecoder` interface:

* :class:`AnalyticEllipsoidDecoder` – an exact, closed-form latent ellipsoid
  used as a test oracle and a shape prior with no trained weights.
* :class:`MlpDecoder` – a small feed-forward network loaded bit-exactly from
  a ``USMW`` weight file (see :func:`load_mlp_weights`).

Both evaluate in float64 torch so the losses can differentiate through them,
and both expose first derivatives with respect to the latent code and the
query point.

Usage::

    decoder = build_decoder("analytic")
    s = decode(decoder, np.zeros(64), np.array([2.0, 0.0, 0.0]))   # 1.0
"""
from __future__ import annotations

import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .errors import FormatError, InvalidInputError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

_MAGIC = b"USMW"
_VERSION = 1
_ACTIVATIONS = {0: "softplus", 1: "tanh", 2: "relu"}
_ACTIVATION_CODES = {name: code for code, name in _ACTIVATIONS.items()}
_ORIGIN_EPS = 1e-9


# ── Data classes ──────────────────────────────────────────────────────────────


@dataclass
class LatentGaussian:
    """Shape code mean and diagonal covariance."""

    mean: np.ndarray
    cov_diag: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov_diag = np.asarray(self.cov_diag, dtype=float).reshape(-1)
        if self.mean.shape != self.cov_diag.shape:
            raise InvalidInputError(
                f"latent mean ({self.mean.size}) and covariance ({self.cov_diag.size}) differ in size"
            )
        if np.any(self.cov_diag < 0):
            raise InvalidInputError("latent covariance diagonal must be non-negative")

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    @classmethod
    def zeros(cls, dim: int, variance: float = 0.0) -> "LatentGaussian":
        return cls(np.zeros(dim), np.full(dim, variance))


@dataclass
class DecoderSpec:
    """Architecture description carried by every decoder."""

    kind: str                       # "analytic-ellipsoid" or "mlp"
    latent_dim: int = 64
    widths: Tuple[int, ...] = field(default_factory=tuple)
    activation: str = "softplus"
    latent_layer: int = 0           # latent is concatenated to the input of this layer

    def __post_init__(self) -> None:
        if self.latent_layer != 0:
            raise FormatError(
                f"latent concatenation is only supported at the input layer, got latent_layer={self.latent_layer}"
            )


# ── Interface ─────────────────────────────────────────────────────────────────


class SdfDecoder(ABC):
    """A signed distance field ``s = G(z, p_o)``: negative inside, zero on the surface."""

    spec: DecoderSpec
    # Canonical shapes are expected to fit in a ball of this radius
    bound_radius: float = 1.0

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def canonical_extent(self, z: np.ndarray) -> float:
        """Radius of a canonical-frame ball holding the shape of latent *z*."""
        return self.bound_radius

    @abstractmethod
    def sdf_t(self, z: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        """Differentiable SDF for ``z`` of shape ``(D,)`` or ``(N, D)`` and ``p`` of shape ``(N, 3)``."""

    def jacobians_t(self, z: torch.Tensor, p: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Per-point ``(∂s/∂z, ∂s/∂p)`` as detached ``(N, D)`` and ``(N, 3)`` tensors.

        The default implementation back-propagates through :meth:`sdf_t`; the
        points are independent so the gradient of the summed output yields
        every per-point row at once.
        """
        n = p.shape[0]
        with torch.enable_grad():
            z_rep = z.detach().expand(n, self.latent_dim).clone().requires_grad_(True)
            p_req = p.detach().clone().requires_grad_(True)
            s = self.sdf_t(z_rep, p_req)
            dz, dp = torch.autograd.grad(s.sum(), (z_rep, p_req), allow_unused=True)
        if dz is None:
            dz = torch.zeros_like(z_rep)
        if dp is None:
            dp = torch.zeros_like(p_req)
        return dz.detach(), dp.detach()


def _as_inputs(decoder: SdfDecoder, z: np.ndarray, p_o: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    z = np.asarray(z, dtype=float)
    if z.shape != (decoder.latent_dim,):
        raise InvalidInputError(
            f"latent code has shape {z.shape}, decoder expects ({decoder.latent_dim},)"
        )
    p_o = np.asarray(p_o, dtype=float)
    if p_o.shape[-1] != 3:
        raise InvalidInputError(f"query points must have 3 coordinates, got shape {p_o.shape}")
    single = p_o.ndim == 1
    return (
        torch.as_tensor(z, dtype=DTYPE),
        torch.as_tensor(p_o.reshape(-1, 3), dtype=DTYPE),
        single,
    )


def decode(decoder: SdfDecoder, z: np.ndarray, p_o: np.ndarray) -> Union[float, np.ndarray]:
    """SDF value(s) at object-frame point(s) ``p_o`` for latent code ``z``."""
    z_t, p_t, single = _as_inputs(decoder, z, p_o)
    with torch.no_grad():
        s = decoder.sdf_t(z_t, p_t).numpy()
    return float(s[0]) if single else s


def decode_jacobians(
    decoder: SdfDecoder, z: np.ndarray, p_o: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact ``(∂s/∂z, ∂s/∂p_o)``; shapes ``(D,), (3,)`` for one point, ``(N, D), (N, 3)`` for many."""
    z_t, p_t, single = _as_inputs(decoder, z, p_o)
    dz, dp = decoder.jacobians_t(z_t, p_t)
    dz_np, dp_np = dz.numpy(), dp.numpy()
    if single:
        return dz_np[0], dp_np[0]
    return dz_np, dp_np


# ── Analytic ellipsoid ────────────────────────────────────────────────────────


class AnalyticEllipsoidDecoder(SdfDecoder):
    """
    Ellipsoid whose radii are ``r = exp(A z)``; ``A`` picks the first three
    latent entries scaled by 0.5, the rest of the code is inert.

    The SDF uses the approximation ``k0 (k0 - 1) / k1`` with
    ``k0 = ‖p / r‖`` and ``k1 = ‖p / r²‖``, exact for spheres.  Points within
    1e-9 of the centre return ``-min(r)``.
    """

    def __init__(self, latent_dim: int = 64) -> None:
        if latent_dim < 3:
            raise InvalidInputError(f"analytic decoder needs latent_dim >= 3, got {latent_dim}")
        self.spec = DecoderSpec(kind="analytic-ellipsoid", latent_dim=latent_dim)
        selector = np.zeros((3, latent_dim))
        selector[np.arange(3), np.arange(3)] = 0.5
        self.selector = torch.as_tensor(selector, dtype=DTYPE)

    def radii_t(self, z: torch.Tensor) -> torch.Tensor:
        return torch.exp(z @ self.selector.T)

    def radii(self, z: np.ndarray) -> np.ndarray:
        return self.radii_t(torch.as_tensor(np.asarray(z, dtype=float), dtype=DTYPE)).numpy()

    def canonical_extent(self, z: np.ndarray) -> float:
        return float(np.max(self.radii(z)))

    def sdf_t(self, z: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        r = self.radii_t(z)
        near = (p * p).sum(-1) < _ORIGIN_EPS**2
        p_safe = torch.where(near[:, None], torch.ones_like(p), p)
        k0 = torch.linalg.norm(p_safe / r, dim=-1)
        k1 = torch.linalg.norm(p_safe / (r * r), dim=-1)
        s = k0 * (k0 - 1.0) / k1
        centre = -torch.min(r, dim=-1).values
        return torch.where(near, centre.expand_as(s), s)

    def jacobians_t(self, z: torch.Tensor, p: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            n = p.shape[0]
            r = self.radii_t(z).expand(n, 3)
            near = (p * p).sum(-1) < _ORIGIN_EPS**2
            p_safe = torch.where(near[:, None], torch.ones_like(p), p)
            q = p_safe / r
            w = p_safe / (r * r)
            k0 = torch.linalg.norm(q, dim=-1, keepdim=True)
            k1 = torch.linalg.norm(w, dim=-1, keepdim=True)
            s = k0 * (k0 - 1.0) / k1
            ds_dk0 = (2.0 * k0 - 1.0) / k1
            ds_dk1 = -s / k1
            dp = ds_dk0 * q / (k0 * r) + ds_dk1 * w / (k1 * r * r)
            dlog_r = -ds_dk0 * q * q / k0 - 2.0 * ds_dk1 * w * w / k1

            # centre: s = -min(r), flat in p
            argmin = torch.argmin(r, dim=-1)
            centre = torch.zeros_like(r)
            centre[torch.arange(n), argmin] = -r[torch.arange(n), argmin]
            dlog_r = torch.where(near[:, None], centre, dlog_r)
            dp = torch.where(near[:, None], torch.zeros_like(dp), dp)
            dz = dlog_r @ self.selector
        return dz, dp


# ── Feed-forward network ──────────────────────────────────────────────────────


def _activation(name: str) -> nn.Module:
    if name == "softplus":
        return nn.Softplus()
    if name == "tanh":
        return nn.Tanh()
    if name == "relu":
        return nn.ReLU()
    raise InvalidInputError(f"unknown activation {name!r}")


class MlpDecoder(nn.Module, SdfDecoder):
    """
    Fully connected SDF network: input ``[z, p]``, hidden layers with a smooth
    activation, ``tanh`` on the scalar output scaled by ``output_scale``.

    Args:
        layers:       ``(W, b)`` pairs with ``W`` of shape ``(rows, cols)``.
        activation:   Hidden activation name (``softplus``, ``tanh`` or ``relu``).
        output_scale: Multiplier applied after the final ``tanh``.
    """

    def __init__(
        self,
        layers: Sequence[Tuple[np.ndarray, np.ndarray]],
        activation: str = "softplus",
        output_scale: float = 1.0,
    ) -> None:
        nn.Module.__init__(self)
        if not layers:
            raise InvalidInputError("network decoder needs at least one layer")
        _check_layer_shapes([np.asarray(W).shape for W, _ in layers])
        self.linears = nn.ModuleList()
        for W, b in layers:
            W = np.asarray(W)
            linear = nn.Linear(W.shape[1], W.shape[0]).to(DTYPE)
            with torch.no_grad():
                linear.weight.copy_(torch.as_tensor(W, dtype=DTYPE))
                linear.bias.copy_(torch.as_tensor(np.asarray(b).reshape(-1), dtype=DTYPE))
            linear.requires_grad_(False)
            self.linears.append(linear)
        self.act = _activation(activation)
        self.output_scale = output_scale
        first_cols = np.asarray(layers[0][0]).shape[1]
        self.spec = DecoderSpec(
            kind="mlp",
            latent_dim=first_cols - 3,
            widths=tuple(np.asarray(W).shape[0] for W, _ in layers[:-1]),
            activation=activation,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for linear in self.linears[:-1]:
            x = self.act(linear(x))
        return self.output_scale * torch.tanh(self.linears[-1](x)).squeeze(-1)

    def sdf_t(self, z: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        z_rep = z.expand(p.shape[0], self.latent_dim)
        return self.forward(torch.cat([z_rep, p], dim=-1))

    def layer_arrays(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(l.weight.detach().numpy(), l.bias.detach().numpy()) for l in self.linears]


def _check_layer_shapes(shapes: Sequence[Tuple[int, ...]]) -> None:
    if shapes[0][1] < 4:
        raise FormatError(f"layer[0].cols must be latent_dim + 3 >= 4, got {shapes[0][1]}")
    for i in range(1, len(shapes)):
        if shapes[i][1] != shapes[i - 1][0]:
            raise FormatError(
                f"layer[{i}].cols ({shapes[i][1]}) does not match layer[{i - 1}].rows ({shapes[i - 1][0]})"
            )
    if shapes[-1][0] != 1:
        raise FormatError(f"layer[{len(shapes) - 1}].rows must be 1 (scalar SDF), got {shapes[-1][0]}")


# ── Weight file: "USMW", u32 version, u32 layer count, per layer
#    (u32 rows, u32 cols, f32 weights row-major, f32 biases), u8 activation.
#    All little-endian. ─────────────────────────────────────────────────────────


def save_mlp_weights(
    path: Union[str, Path],
    layers: Sequence[Tuple[np.ndarray, np.ndarray]],
    activation: str = "softplus",
) -> Path:
    """Write *layers* in the ``USMW`` format (weights stored as float32)."""
    if activation not in _ACTIVATION_CODES:
        raise InvalidInputError(f"unknown activation {activation!r}")
    _check_layer_shapes([np.asarray(W).shape for W, _ in layers])
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(layers))]
    for W, b in layers:
        W = np.asarray(W, dtype="<f4")
        b = np.asarray(b, dtype="<f4").reshape(-1)
        if b.size != W.shape[0]:
            raise InvalidInputError(f"bias of size {b.size} does not match {W.shape[0]} rows")
        chunks.append(struct.pack("<II", *W.shape))
        chunks.append(np.ascontiguousarray(W).tobytes())
        chunks.append(b.tobytes())
    chunks.append(struct.pack("<B", _ACTIVATION_CODES[activation]))
    path.write_bytes(b"".join(chunks))
    logger.info("Network weights (%d layer(s)) → %s", len(layers), path)
    return path


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self._data = data
        self._pos = 0
        self._source = source

    def take(self, size: int, field_name: str) -> bytes:
        if self._pos + size > len(self._data):
            raise FormatError(f"{self._source}: truncated while reading {field_name}")
        chunk = self._data[self._pos:self._pos + size]
        self._pos += size
        return chunk

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos


def load_mlp_weights(path: Union[str, Path]) -> MlpDecoder:
    """
    Read a ``USMW`` weight file.

    Raises:
        FormatError: bad magic, unsupported version, truncation, inconsistent
                     layer dimensions, unknown activation or trailing bytes.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weight file {path}: {exc}") from exc
    reader = _Reader(data, str(path))
    if reader.take(4, "magic") != _MAGIC:
        raise FormatError(f"{path}: bad magic, expected {_MAGIC!r}")
    (version,) = struct.unpack("<I", reader.take(4, "version"))
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<I", reader.take(4, "layer_count"))
    if count == 0:
        raise FormatError(f"{path}: layer_count must be >= 1")

    layers: List[Tuple[np.ndarray, np.ndarray]] = []
    for i in range(count):
        rows, cols = struct.unpack("<II", reader.take(8, f"layer[{i}].shape"))
        if rows == 0 or cols == 0:
            raise FormatError(f"{path}: layer[{i}] has an empty dimension ({rows}x{cols})")
        W = np.frombuffer(reader.take(4 * rows * cols, f"layer[{i}].weights"), dtype="<f4")
        b = np.frombuffer(reader.take(4 * rows, f"layer[{i}].biases"), dtype="<f4")
        layers.append((W.reshape(rows, cols).copy(), b.copy()))
    (code,) = struct.unpack("<B", reader.take(1, "activation"))
    if code not in _ACTIVATIONS:
        raise FormatError(f"{path}: unknown activation code {code}")
    if reader.remaining:
        raise FormatError(f"{path}: {reader.remaining} trailing byte(s) after activation")

    try:
        _check_layer_shapes([W.shape for W, _ in layers])
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    decoder = MlpDecoder(layers, activation=_ACTIVATIONS[code])
    logger.info(
        "Loaded network decoder from %s: latent_dim=%d widths=%s activation=%s",
        path, decoder.latent_dim, decoder.spec.widths, decoder.spec.activation,
    )
    return decoder


def build_decoder(selector: str, latent_dim: int = 64) -> SdfDecoder:
    """Parse a ``analytic | mlp:<path>`` selector."""
    if selector == "analytic":
        return AnalyticEllipsoidDecoder(latent_dim)
    if selector.startswith("mlp:"):
        decoder = load_mlp_weights(selector[4:])
        if decoder.latent_dim != latent_dim:
            logger.warning(
                "Weight file defines latent_dim=%d; configured latent_dim=%d is ignored.",
                decoder.latent_dim, latent_dim,
            )
        return decoder
    raise InvalidInputError(f"decoder selector must be 'analytic' or 'mlp:<path>', got {selector!r}")


def project_to_surface(
    decoder: SdfDecoder,
    z: np.ndarray,
    points: np.ndarray,
    iters: int = 20,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Newton steps ``p ← p - s ∇s / ‖∇s‖²`` towards the zero level set.

    Returns:
        The moved points and their final SDF values.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    for _ in range(iters):
        s = np.atleast_1d(decode(decoder, z, p))
        _, grad = decode_jacobians(decoder, z, p)
        grad_sq = np.maximum((grad * grad).sum(axis=1), 1e-12)
        p = p - (s / grad_sq)[:, None] * grad
    return p, np.atleast_1d(decode(decoder, z, p))


def sample_surface_points(
    decoder: SdfDecoder,
    z: np.ndarray,
    count: int = 2000,
    seed: int = 0,
    iters: int = 20,
    tol: float = 1e-4,
) -> np.ndarray:
    """
    Canonical-frame points on the zero level set of ``G(z, ·)``.

    Random directions on the bounding sphere are pulled onto the surface with
    :func:`project_to_surface`; points that do not converge are dropped.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((count, 3))
    start = decoder.canonical_extent(z) * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    p, s = project_to_surface(decoder, z, start, iters)
    kept = p[np.abs(s) < tol]
    if kept.shape[0] == 0:
        raise InvalidInputError("decoder has no reachable zero level set inside its bound")
    logger.debug("Surface sampling kept %d/%d point(s).", kept.shape[0], count)
    return kept
