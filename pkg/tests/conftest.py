from __future__ import annotations

import numpy as np
import pytest

from covariance import exact_stats
from gauss_ml import ParamVector, pack
from sim import ArrayScenario, avs_manifold

ULA_DOAS_DEG = (-56.0, 43.0, 71.0)


def random_steering(rng: np.random.Generator, M: int, D: int) -> np.ndarray:
    return (rng.standard_normal((M, D)) + 1j * rng.standard_normal((M, D))) / np.sqrt(2.0)


def random_doas(rng: np.random.Generator, D: int, gap: float = 0.3) -> np.ndarray:
    """Ascending DOAs in [-pi, pi) at least ``gap`` apart."""
    while True:
        theta = np.sort(rng.uniform(-np.pi, np.pi, size=D))
        if D == 1 or np.min(np.diff(theta)) > gap:
            return theta


def random_phi(rng: np.random.Generator, M: int, D: int, noise_var: float | None = None) -> ParamVector:
    A = random_steering(rng, M, D)
    A[0] = np.abs(A[0])
    if noise_var is None:
        noise_var = rng.uniform(0.2, 1.0)
    return pack(A, random_doas(rng, D), noise_var)


def random_pd(rng: np.random.Generator, n: int) -> np.ndarray:
    B = random_steering(rng, n, n)
    return B @ B.conj().T + 0.1 * np.eye(n)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def ula7() -> ArrayScenario:
    return ArrayScenario(geometry="ula", M=7)


@pytest.fixture
def ula_truth(rng):
    """ULA DOAs with a random regular steering matrix, plus its exact noiseless statistics."""
    theta = np.radians(ULA_DOAS_DEG)
    A = random_steering(rng, 7, 3)
    return theta, A, exact_stats(avs_manifold(A, theta).matrix, 0.0)
