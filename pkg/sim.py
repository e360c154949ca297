"""
Array scenarios, AVS steering manifolds and synthetic measurement batches.

An acoustic vector sensor (AVS) measures pressure plus the two in-plane
particle-velocity components, so every sensor contributes three channels.
The 3M-dim AVS steering vector of a source at azimuth theta is the Kronecker
product c(theta) (x) a, with c(theta) = (1, cos theta, sin theta) and ``a``
the M-dim pressure steering vector. Everything here is a pure function of its
inputs plus an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

# Distances are in wavelengths, so k = 2*pi/lambda = 2*pi.
WAVENUMBER = 2.0 * np.pi

GeometryKind = Literal["ula", "uca", "explicit"]
SourceKind = Literal["cn", "qpsk", "gmm"]
NoiseKind = Literal["cn", "laplace"]

SOURCE_KINDS: tuple[str, ...] = ("cn", "qpsk", "gmm")
NOISE_KINDS: tuple[str, ...] = ("cn", "laplace")


def wrap_angle(theta: np.ndarray | float) -> np.ndarray | float:
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


def as_doa_vector(theta) -> np.ndarray:
    """Validate a DOA vector: real, in [-pi, pi), strictly ascending."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size == 0:
        raise ValueError("DOA vector is empty")
    if np.any(theta < -np.pi) or np.any(theta >= np.pi):
        raise ValueError(f"DOAs must lie in [-pi, pi), got {theta}")
    if np.any(np.diff(theta) <= 0):
        raise ValueError(f"DOAs must be strictly ascending, got {theta}")
    return theta


# ---------------------------------------------------------------------------
# Pressure steering vectors
# ---------------------------------------------------------------------------

def ula_pressure_steering(M: int, theta: float, spacing: float = 0.5) -> np.ndarray:
    """ULA pressure steering vector: entry m is exp(j*2*pi*spacing*(m-1)*cos theta)."""
    m = np.arange(M)
    return np.exp(1j * WAVENUMBER * spacing * m * np.cos(theta))


def uca_pressure_steering(M: int, theta: float, radius: float = 0.5) -> np.ndarray:
    """UCA pressure steering vector: entry m is exp(j*2*pi*radius*cos(theta - 2*pi*(m-1)/M))."""
    if M < 3:
        raise ValueError(f"UCA needs at least 3 sensors, got M={M}")
    m = np.arange(M)
    return np.exp(1j * WAVENUMBER * radius * np.cos(theta - 2.0 * np.pi * m / M))


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArrayScenario:
    """
    Array geometry plus calibration errors and faults.

    ``faulty`` holds 1-based sensor numbers, the way they are quoted for a
    physical array ("the 2nd and 4th AVS"). ``steering`` is only used by the
    explicit geometry, where the pressure steering matrix is given directly.
    """

    geometry: GeometryKind
    M: int
    spacing: float = 0.5
    radius: float = 0.5
    gains: np.ndarray | None = None
    position_offsets: np.ndarray | None = None
    faulty: frozenset[int] = field(default_factory=frozenset)
    steering: np.ndarray | None = None
    wavenumber: float = WAVENUMBER

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ValueError(f"need at least 2 AVS units, got M={self.M}")
        if self.geometry not in ("ula", "uca", "explicit"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.gains is not None:
            gains = np.asarray(self.gains, dtype=float).reshape(-1)
            if gains.shape != (self.M,) or np.any(gains <= 0):
                raise ValueError("gains must be a positive M-vector")
            object.__setattr__(self, "gains", gains)
        if self.position_offsets is not None:
            offsets = np.asarray(self.position_offsets, dtype=float)
            if offsets.shape != (self.M, 2):
                raise ValueError(f"position_offsets must be {self.M}x2, got {offsets.shape}")
            object.__setattr__(self, "position_offsets", offsets)
        faulty = frozenset(int(f) for f in self.faulty)
        if any(f < 1 or f > self.M for f in faulty):
            raise ValueError(f"faulty sensors must be in 1..{self.M}, got {sorted(faulty)}")
        object.__setattr__(self, "faulty", faulty)
        if self.geometry == "explicit":
            if self.steering is None:
                raise ValueError("explicit geometry needs a steering matrix")
            steering = np.asarray(self.steering, dtype=complex)
            if steering.ndim != 2 or steering.shape[0] != self.M:
                raise ValueError(f"steering matrix must have {self.M} rows")
            object.__setattr__(self, "steering", steering)

    @property
    def is_calibrated(self) -> bool:
        return self.gains is None and self.position_offsets is None

    def nominal_steering(self, theta: np.ndarray) -> np.ndarray:
        """Unperturbed M x D pressure steering matrix for the geometry."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if self.geometry == "explicit":
            if self.steering.shape[1] != theta.size:
                raise ValueError(
                    f"explicit steering has {self.steering.shape[1]} columns, got {theta.size} DOAs"
                )
            return self.steering.copy()
        if self.geometry == "ula":
            cols = [ula_pressure_steering(self.M, t, self.spacing) for t in theta]
        else:
            cols = [uca_pressure_steering(self.M, t, self.radius) for t in theta]
        return np.stack(cols, axis=1)

    def steering_matrix(self, theta: np.ndarray) -> np.ndarray:
        """Pressure steering matrix A with perturbations and faults applied."""
        A = self.nominal_steering(theta)
        A = apply_perturbations(A, self, theta)
        return apply_faults(A, self.faulty)


def draw_perturbations(scenario: ArrayScenario, rng: np.random.Generator) -> ArrayScenario:
    """Draw gains ~ U(0.7, 1.3) and x/y offsets ~ U(-1, 1) once for a scenario."""
    gains = rng.uniform(0.7, 1.3, size=scenario.M)
    offsets = rng.uniform(-1.0, 1.0, size=(scenario.M, 2))
    return replace(scenario, gains=gains, position_offsets=offsets)


def apply_perturbations(A: np.ndarray, scenario: ArrayScenario, theta: np.ndarray) -> np.ndarray:
    """A_md <- A_md * g_m * exp(j*k*(cos(theta_d)*dx_m + sin(theta_d)*dy_m))."""
    A = np.array(A, dtype=complex)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if A.shape != (scenario.M, theta.size):
        raise ValueError(f"steering matrix shape {A.shape} does not match M={scenario.M}, D={theta.size}")
    if scenario.gains is not None:
        A *= scenario.gains[:, None]
    if scenario.position_offsets is not None:
        dx = scenario.position_offsets[:, 0:1]
        dy = scenario.position_offsets[:, 1:2]
        A *= np.exp(1j * scenario.wavenumber * (dx * np.cos(theta) + dy * np.sin(theta)))
    return A


def apply_faults(A: np.ndarray, faulty) -> np.ndarray:
    """Zero the rows of faulty sensors (1-based numbers)."""
    A = np.array(A, dtype=complex)
    rows = sorted(int(f) - 1 for f in faulty)
    if rows and (rows[0] < 0 or rows[-1] >= A.shape[0]):
        raise ValueError(f"faulty sensors out of range 1..{A.shape[0]}: {sorted(faulty)}")
    A[rows, :] = 0.0
    return A


# ---------------------------------------------------------------------------
# AVS manifold
# ---------------------------------------------------------------------------

def c_vector(theta: float) -> np.ndarray:
    """Channel gains (1, cos theta, sin theta) of pressure, vx and vy."""
    return np.array([1.0, np.cos(theta), np.sin(theta)])


def c_matrix(theta: np.ndarray) -> np.ndarray:
    """3 x D matrix C(theta) whose columns are c_vector(theta_d)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    return np.vstack([np.ones_like(theta), np.cos(theta), np.sin(theta)])


def f_matrix(theta: float) -> np.ndarray:
    """F(theta) = c c^T, the 3x3 channel-coupling matrix of one source."""
    c = c_vector(theta)
    return np.outer(c, c)


def f_matrix_derivative(theta: float) -> np.ndarray:
    """dF/dtheta."""
    s, c = np.sin(theta), np.cos(theta)
    s2, c2 = np.sin(2.0 * theta), np.cos(2.0 * theta)
    return np.array([
        [0.0, -s, c],
        [-s, -s2, c2],
        [c, c2, s2],
    ])


@dataclass(frozen=True)
class AvsManifold:
    """Khatri-Rao manifold Abar = C(theta) <> A, stacked as [A; A cos; A sin]."""

    matrix: np.ndarray
    C: np.ndarray

    @property
    def M(self) -> int:
        return self.matrix.shape[0] // 3

    def block(self, i: int) -> np.ndarray:
        """Rows of channel i (0 pressure, 1 vx, 2 vy)."""
        M = self.M
        return self.matrix[i * M:(i + 1) * M]


def avs_manifold(A: np.ndarray, theta) -> AvsManifold:
    """Build the 3M x D AVS manifold for pressure steering A and DOAs theta."""
    A = np.asarray(A, dtype=complex)
    if A.ndim == 1:
        A = A[:, None]
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if A.shape[1] != theta.size:
        raise ValueError(f"A has {A.shape[1]} columns but {theta.size} DOAs were given")
    C = c_matrix(theta)
    matrix = np.vstack([A * C[0], A * C[1], A * C[2]])
    return AvsManifold(matrix=matrix, C=C)


# ---------------------------------------------------------------------------
# Sources and noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceSpec:
    """D unit-power sources, T snapshots."""

    kind: SourceKind
    D: int
    T: int

    def __post_init__(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}; expected one of {SOURCE_KINDS}")
        if self.D < 1 or self.T < 1:
            raise ValueError(f"need D >= 1 and T >= 1, got D={self.D}, T={self.T}")


@dataclass(frozen=True)
class NoiseSpec:
    """Spatially and temporally white noise with E|v|^2 = variance."""

    kind: NoiseKind
    variance: float

    def __post_init__(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.variance < 0:
            raise ValueError(f"noise variance must be >= 0, got {self.variance}")


def _circular_normal(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _gaussian_mixture(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    # Equiprobable components N(+-1/sqrt(2), 1/2) for each real part: variance 1
    # per part, so the complex sample is scaled by 1/sqrt(2) to unit power.
    def part() -> np.ndarray:
        signs = rng.choice((-1.0, 1.0), size=shape)
        return signs / np.sqrt(2.0) + np.sqrt(0.5) * rng.standard_normal(shape)

    return (part() + 1j * part()) / np.sqrt(2.0)


def generate_sources(spec: SourceSpec, rng: np.random.Generator) -> np.ndarray:
    """D x T matrix of independent zero-mean unit-power source samples."""
    shape = (spec.D, spec.T)
    if spec.kind == "cn":
        return _circular_normal(shape, rng)
    if spec.kind == "qpsk":
        re = rng.choice((-1.0, 1.0), size=shape)
        im = rng.choice((-1.0, 1.0), size=shape)
        return (re + 1j * im) / np.sqrt(2.0)
    return _gaussian_mixture(shape, rng)


def generate_noise(spec: NoiseSpec, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Noise batch of the given shape."""
    if spec.variance == 0:
        return np.zeros(shape, dtype=complex)
    sigma = np.sqrt(spec.variance)
    if spec.kind == "cn":
        return sigma * _circular_normal(shape, rng)
    # Laplace(b) has variance 2b^2; b = sigma/2 gives sigma^2/2 per part.
    b = sigma / 2.0
    return rng.laplace(0.0, b, size=shape) + 1j * rng.laplace(0.0, b, size=shape)


def synthesize(
    abar: np.ndarray,
    S: np.ndarray,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """Y = Abar S + V, the 3M x T measurement batch."""
    abar = np.asarray(abar, dtype=complex)
    S = np.asarray(S, dtype=complex)
    if abar.shape[1] != S.shape[0]:
        raise ValueError(f"manifold has {abar.shape[1]} columns but S has {S.shape[0]} rows")
    Y = abar @ S
    return Y + generate_noise(noise, Y.shape, rng)


def noise_variance_from_snr(snr_db: float) -> float:
    """Per-source unit power: sigma^2 = 10^(-SNR/10)."""
    return float(10.0 ** (-snr_db / 10.0))


def trial_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent, reproducible generator for (master seed, point, trial, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))
