"""Fixtures and builders for evkf tests."""

from __future__ import annotations

import json
from typing import TYPE_CHECKING, Any

import numpy as np
import pytest

from evkf import expfam
from evkf.dynamics import LinearGaussian
from evkf.expfam import FamilyTag, NaturalParams
from evkf.observations import LinearGaussianObs, PoissonExp

if TYPE_CHECKING:
    from collections.abc import Callable
    from pathlib import Path

    from numpy.typing import NDArray


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator."""
    return np.random.default_rng(20240607)


def random_spd(L: int, rng: np.random.Generator, scale: float = 1.0) -> NDArray[np.float64]:
    """Well-conditioned random SPD matrix."""
    X = rng.standard_normal((L, L))
    return np.asarray(scale * (X @ X.T / L + 0.5 * np.eye(L)))


def random_gaussian(rng: np.random.Generator, L: int, diagonal: bool = False) -> NaturalParams:
    """Gaussian with a random mean and covariance."""
    mean = rng.standard_normal(L)
    if diagonal:
        return expfam.gaussian(mean, rng.uniform(0.3, 2.0, L), diagonal=True)
    return expfam.gaussian(mean, random_spd(L, rng))


def random_params(tag: FamilyTag, rng: np.random.Generator) -> NaturalParams:
    """Random valid natural parameters of any family."""
    if tag.kind.value == "gaussian_dense":
        return random_gaussian(rng, tag.dim)
    if tag.kind.value == "gaussian_diag":
        return random_gaussian(rng, tag.dim, diagonal=True)
    if tag.kind.value == "cb":
        return expfam.continuous_bernoulli(rng.uniform(-4.0, 4.0, tag.dim))
    return expfam.gamma(rng.uniform(1.5, 6.0, tag.dim), rng.uniform(0.5, 4.0, tag.dim))


ALL_TAGS = [
    FamilyTag.gaussian(1),
    FamilyTag.gaussian(3),
    FamilyTag.gaussian(2, diagonal=True),
    FamilyTag.continuous_bernoulli(2),
    FamilyTag.gamma(2),
]


def make_lgssm(
    rng: np.random.Generator, L: int = 2, N: int = 3
) -> tuple[LinearGaussian, LinearGaussianObs]:
    """Random stable linear-Gaussian state-space model."""
    A = rng.standard_normal((L, L))
    A *= 0.9 / max(1.0, float(np.max(np.abs(np.linalg.eigvals(A)))))
    dyn = LinearGaussian(A, random_spd(L, rng, 0.2))
    obs = LinearGaussianObs(
        rng.standard_normal((N, L)), rng.standard_normal(N) * 0.1, rng.uniform(0.2, 1.0, N)
    )
    return dyn, obs


def make_poisson(rng: np.random.Generator, L: int = 2, N: int = 5, dt: float = 0.1) -> PoissonExp:
    """Poisson readout with modest rates."""
    return PoissonExp(0.5 * rng.standard_normal((N, L)), rng.normal(1.0, 0.2, N), dt)


def finite_difference(
    f: Callable[[NDArray[np.float64]], float], x: NDArray[np.float64], eps: float = 1e-6
) -> NDArray[np.float64]:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = eps
        grad.flat[i] = (f(x + step) - f(x - step)) / (2.0 * eps)
    return grad


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[..., Path]:
    """Write a JSON run configuration under tmp_path and return its path."""

    def _write(name: str = "run.json", **data: Any) -> Path:
        data.setdefault("out_dir", str(tmp_path / "out"))
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2))
        return path

    return _write
