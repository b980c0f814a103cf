"""
Shared pytest fixtures for the usm test suite.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from usm.config import EsConfig, OptimConfig, RayConfig
from usm.decoder import AnalyticEllipsoidDecoder
from usm.ingestion import Intrinsics
from usm.synth import SynthSpec, generate_scene

# ── Constants used across tests ───────────────────────────────────────────────

LATENT_DIM = 8


# ── Fixtures ──────────────────────────────────────────────────────────────────


@pytest.fixture(autouse=True)
def clean_env(monkeypatch: pytest.MonkeyPatch) -> None:
    """Keep USM_* variables from the developer's shell or .env out of the tests."""
    for name in ("USM_THREADS", "USM_LOG_LEVEL", "USM_SEED", "USM_DECODER"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def decoder() -> AnalyticEllipsoidDecoder:
    """Unit sphere at ``z = 0`` with a short latent code."""
    return AnalyticEllipsoidDecoder(LATENT_DIM)


@pytest.fixture
def intrinsics() -> Intrinsics:
    return Intrinsics(fx=32.0, fy=32.0, cx=16.0, cy=16.0, width=32, height=32)


@pytest.fixture
def synth_spec() -> SynthSpec:
    return SynthSpec(
        gt_latent=np.zeros(LATENT_DIM),
        views=2,
        radius=3.0,
        width=32,
        height=32,
        focal=32.0,
    )


@pytest.fixture
def scene_dir(tmp_path: Path, decoder: AnalyticEllipsoidDecoder, synth_spec: SynthSpec) -> Path:
    """A noise-free two-view unit-sphere scene written to disk."""
    out = tmp_path / "scene"
    generate_scene(decoder, synth_spec, out)
    return out


@pytest.fixture
def fast_optim() -> OptimConfig:
    """Optimiser settings small enough for unit tests."""
    return OptimConfig(
        iters=3,
        subsample=200,
        es=EsConfig(sample_count=64),
        ray=RayConfig(samples_per_ray=16, sobol_count=16, pixels_per_view=16),
    )
