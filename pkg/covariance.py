"""
Second-order statistics of AVS array batches.

The denoised covariance R_x = R_y - sigma^2 I is viewed as a 3 x 3 grid of
M x M slabs, slab (i, j) being the coupling between channel i and channel j
(0 pressure, 1 vx, 2 vy). At exact statistics every slab equals
sum_d c_i(theta_d) c_j(theta_d) a_d a_d^H, which is the CPD structure the
phase-1 estimator fits.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

HERMITIAN_TOL = 1e-8


def _check_hermitian(R: np.ndarray, name: str = "matrix") -> np.ndarray:
    R = np.asarray(R, dtype=complex)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"{name} must be square, got shape {R.shape}")
    scale = max(np.abs(R).max(), 1.0)
    if np.abs(R - R.conj().T).max() > HERMITIAN_TOL * scale:
        raise ValueError(f"{name} is not Hermitian")
    return R


def empirical_covariance(Y: np.ndarray) -> np.ndarray:
    """(1/T) sum_t y[t] y[t]^H for a 3M x T batch."""
    Y = np.asarray(Y, dtype=complex)
    if Y.ndim != 2 or Y.shape[1] == 0:
        raise ValueError("empirical covariance needs a non-empty 2-D batch")
    R = Y @ Y.conj().T / Y.shape[1]
    return (R + R.conj().T) / 2.0


def model_covariance(abar: np.ndarray, noise_var: float) -> np.ndarray:
    """R_y = Abar Abar^H + sigma^2 I (unit-power uncorrelated sources)."""
    abar = np.asarray(abar, dtype=complex)
    R = abar @ abar.conj().T
    R = (R + R.conj().T) / 2.0
    return R + noise_var * np.eye(abar.shape[0])


def estimate_noise_variance(ry: np.ndarray, n_sources: int) -> float:
    """ML noise variance: mean of the 3M - D smallest eigenvalues of R_y."""
    ry = _check_hermitian(ry, "R_y")
    n = ry.shape[0]
    if not 0 <= n_sources < n:
        raise ValueError(f"need 0 <= D < {n}, got D={n_sources}")
    eigvals = scipy.linalg.eigvalsh(ry)
    return float(max(eigvals[: n - n_sources].mean(), 0.0))


# ---------------------------------------------------------------------------
# Denoised statistics and the tensor view
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovarianceStats:
    """
    Empirical covariance, its noise-variance estimate and the denoised matrix.

    ``slabs[i, j]`` is the symmetrized slab (R_x^(i,j) + R_x^(j,i)) / 2, which
    is Hermitian and equal to ``slabs[j, i]``.
    """

    ry: np.ndarray
    noise_var: float
    rx: np.ndarray
    slabs: np.ndarray

    @property
    def M(self) -> int:
        return self.ry.shape[0] // 3

    @cached_property
    def rx_sym(self) -> np.ndarray:
        """3M x 3M matrix assembled from the symmetrized slabs."""
        return np.block([[self.slabs[i, j] for j in range(3)] for i in range(3)])

    def slab(self, i: int, j: int) -> np.ndarray:
        return tensor_slab(self, i, j)


def _raw_slabs(R: np.ndarray) -> np.ndarray:
    M = R.shape[0] // 3
    return R.reshape(3, M, 3, M).transpose(0, 2, 1, 3)


def denoise(ry: np.ndarray, noise_var: float) -> CovarianceStats:
    """R_x = R_y - sigma^2 I plus the symmetrized slab tensor."""
    ry = _check_hermitian(ry, "R_y")
    if ry.shape[0] % 3:
        raise ValueError(f"AVS covariance size must be a multiple of 3, got {ry.shape[0]}")
    rx = ry - noise_var * np.eye(ry.shape[0])
    raw = _raw_slabs(rx)
    slabs = (raw + raw.transpose(1, 0, 2, 3)) / 2.0
    return CovarianceStats(ry=ry, noise_var=float(noise_var), rx=rx, slabs=slabs)


def covariance_stats(Y: np.ndarray, n_sources: int) -> CovarianceStats:
    """Empirical covariance, ML noise variance and denoised slabs in one go."""
    ry = empirical_covariance(Y)
    return denoise(ry, estimate_noise_variance(ry, n_sources))


def exact_stats(abar: np.ndarray, noise_var: float = 0.0) -> CovarianceStats:
    """Statistics at the true covariance with the true noise variance."""
    return denoise(model_covariance(abar, noise_var), noise_var)


def tensor_slab(stats: CovarianceStats, i: int, j: int) -> np.ndarray:
    """The (i, j) M x M slab, channels numbered 0 (pressure), 1 (vx), 2 (vy)."""
    if i not in (0, 1, 2) or j not in (0, 1, 2):
        raise ValueError(f"slab index out of range: ({i}, {j})")
    return stats.slabs[i, j]


# ---------------------------------------------------------------------------
# Gaussian-case error covariance of the sample covariance
# ---------------------------------------------------------------------------

def gaussian_error_cov(
    ry: np.ndarray,
    T: int,
    i: int,
    j: int,
    k: int,
    l: int,
) -> tuple[complex, complex]:
    """
    Covariance and pseudo-covariance of eps = R_y_hat - R_y for CN data:
    E[eps_ij eps_kl^*] = R_ik R_jl^* / T and E[eps_ij eps_kl] = R_il R_kj / T.
    """
    if T <= 0:
        raise ValueError(f"sample size must be positive, got T={T}")
    ry = np.asarray(ry, dtype=complex)
    n = ry.shape[0]
    if not all(0 <= idx < n for idx in (i, j, k, l)):
        raise ValueError(f"indices out of range for a {n}x{n} covariance")
    cov = ry[i, k] * np.conj(ry[j, l]) / T
    pcov = ry[i, l] * ry[k, j] / T
    return complex(cov), complex(pcov)


def gaussian_error_cov_matrix(ry: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Full (n^2 x n^2) covariance and pseudo-covariance of vec(eps), column-major vec."""
    if T <= 0:
        raise ValueError(f"sample size must be positive, got T={T}")
    ry = np.asarray(ry, dtype=complex)
    n = ry.shape[0]
    cov4 = np.einsum("ik,jl->ijkl", ry, ry.conj()) / T
    pcov4 = np.einsum("il,kj->ijkl", ry, ry) / T
    # vec index of (i, j) is i + j*n
    cov = cov4.transpose(1, 0, 3, 2).reshape(n * n, n * n)
    pcov = pcov4.transpose(1, 0, 3, 2).reshape(n * n, n * n)
    return cov, pcov
