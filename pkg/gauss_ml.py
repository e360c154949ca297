"""
Phase 2: Gaussian ML / KLD covariance fitting by Fisher scoring.

The real unknowns are packed as

    phi = [vec(Re A); vec(Im A[1:]); theta; sigma^2]       (length 2MD + 1)

with column-major vec and the first row of A real (its imaginary part is
not a parameter). Indices into phi are 0-based.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from covariance import model_covariance
from cpd_acdc import normalize_estimate
from sim import ArrayScenario, avs_manifold, f_matrix, f_matrix_derivative, noise_variance_from_snr, wrap_angle

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12
FIRST_ROW_TOL = 1e-10
KLD_ROUNDOFF = 1e-10


# ---------------------------------------------------------------------------
# Parameter vector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamVector:
    """Packed real parameter vector for an M-sensor, D-source model."""

    values: np.ndarray
    M: int
    D: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size != 2 * self.M * self.D + 1:
            raise ValueError(f"expected {2 * self.M * self.D + 1} parameters, got {values.size}")
        object.__setattr__(self, "values", values)

    @property
    def K(self) -> int:
        return self.values.size

    @property
    def A(self) -> np.ndarray:
        return unpack(self)[0]

    @property
    def theta(self) -> np.ndarray:
        return self.values[self.theta_slice]

    @property
    def noise_var(self) -> float:
        return float(self.values[-1])

    @property
    def theta_slice(self) -> slice:
        start = 2 * self.M * self.D - self.D
        return slice(start, start + self.D)

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values=values, M=self.M, D=self.D)


def pack(A: np.ndarray, theta, noise_var: float) -> ParamVector:
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2:
        raise ValueError(f"A must be an M x D matrix, got shape {A.shape}")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    M, D = A.shape
    if theta.size != D:
        raise ValueError(f"A has {D} columns but {theta.size} DOAs were given")
    if noise_var < 0:
        raise ValueError(f"noise variance must be >= 0, got {noise_var}")
    tol = FIRST_ROW_TOL * max(np.abs(A).max(initial=0.0), 1.0)
    if np.any(np.abs(A[0].imag) > tol) or np.any(A[0].real < -tol):
        raise ValueError("first row of A must be real and non-negative")
    values = np.concatenate([
        A.real.ravel(order="F"),
        A[1:].imag.ravel(order="F"),
        theta,
        [float(noise_var)],
    ])
    return ParamVector(values=values, M=M, D=D)


def unpack(phi: ParamVector) -> tuple[np.ndarray, np.ndarray, float]:
    """(A, theta, sigma^2); A's first row is real by construction."""
    M, D = phi.M, phi.D
    v = phi.values
    MD = M * D
    A = v[:MD].reshape((M, D), order="F").astype(complex)
    A[1:] += 1j * v[MD:2 * MD - D].reshape((M - 1, D), order="F")
    return A, v[phi.theta_slice].copy(), float(v[-1])


def phi_covariance(phi: ParamVector) -> np.ndarray:
    """R_y(phi) = Abar Abar^H + sigma^2 I."""
    A, theta, noise_var = unpack(phi)
    return model_covariance(avs_manifold(A, theta).matrix, noise_var)


# ---------------------------------------------------------------------------
# Gradients of R_y
# ---------------------------------------------------------------------------

def _parameter_role(phi: ParamVector, i: int) -> tuple[str, int, int]:
    M, D = phi.M, phi.D
    MD = M * D
    if not 0 <= i < phi.K:
        raise ValueError(f"parameter index {i} out of range 0..{phi.K - 1}")
    if i < MD:
        return "re", i % M, i // M
    if i < 2 * MD - D:
        k = i - MD
        return "im", 1 + k % (M - 1), k // (M - 1)
    if i < 2 * MD:
        return "theta", 0, i - (2 * MD - D)
    return "noise", 0, 0


def cov_gradient(phi: ParamVector, i: int) -> np.ndarray:
    """dR_y / dphi_i, a Hermitian 3M x 3M matrix."""
    A, theta, _ = unpack(phi)
    M = phi.M
    role, m, d = _parameter_role(phi, i)
    if role == "noise":
        return np.eye(3 * M, dtype=complex)
    a = A[:, d]
    if role == "theta":
        return np.kron(f_matrix_derivative(theta[d]), np.outer(a, a.conj()))
    e = np.zeros(M)
    e[m] = 1.0
    if role == "re":
        inner = np.outer(e, a.conj()) + np.outer(a, e)
    else:
        inner = 1j * (np.outer(e, a.conj()) - np.outer(a, e))
    return np.kron(f_matrix(theta[d]), inner)


def cov_gradients(phi: ParamVector) -> np.ndarray:
    """All K gradients stacked into a K x 3M x 3M array."""
    return np.stack([cov_gradient(phi, i) for i in range(phi.K)])


def cov_inverse(phi: ParamVector) -> np.ndarray:
    """R_y^-1 = (I - Abar (sigma^2 I_D + Abar^H Abar)^-1 Abar^H) / sigma^2."""
    A, theta, noise_var = unpack(phi)
    if noise_var <= 0:
        raise ValueError(f"noise variance must be > 0 to invert R_y, got {noise_var}")
    abar = avs_manifold(A, theta).matrix
    inner = noise_var * np.eye(phi.D) + abar.conj().T @ abar
    correction = abar @ scipy.linalg.solve(inner, abar.conj().T, assume_a="pos")
    inv = (np.eye(abar.shape[0]) - correction) / noise_var
    return (inv + inv.conj().T) / 2.0


# ---------------------------------------------------------------------------
# Fisher information and CRLB
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FisherInfo:
    J: np.ndarray
    T: int

    @property
    def K(self) -> int:
        return self.J.shape[0]


@dataclass(frozen=True)
class CrlbResult:
    """Inverse FIM; ``pseudo_inverse`` marks a numerically singular FIM."""

    matrix: np.ndarray
    cond: float
    pseudo_inverse: bool = False

    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.matrix), 0.0))


def _whitened_gradients(phi: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    R_inv = cov_inverse(phi)
    return R_inv, np.einsum("ab,kbc->kac", R_inv, cov_gradients(phi))


def fim(phi: ParamVector, T: int) -> FisherInfo:
    """J_ij = T Re Tr(R^-1 dR_i R^-1 dR_j)."""
    if T <= 0:
        raise ValueError(f"sample size must be positive, got T={T}")
    _, X = _whitened_gradients(phi)
    J = T * np.real(np.einsum("iab,jba->ij", X, X))
    return FisherInfo(J=(J + J.T) / 2.0, T=T)


def crlb(phi: ParamVector, T: int) -> CrlbResult:
    J = fim(phi, T).J
    cond = float(np.linalg.cond(J))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        logger.warning("FIM is numerically singular (cond %.3g); using the pseudo-inverse", cond)
        inv = scipy.linalg.pinvh(J)
        return CrlbResult(matrix=(inv + inv.T) / 2.0, cond=cond, pseudo_inverse=True)
    inv = scipy.linalg.inv(J)
    return CrlbResult(matrix=(inv + inv.T) / 2.0, cond=cond)


def crlb_doa(scenario: ArrayScenario, theta, snr_db: float, T: int) -> np.ndarray:
    """Square roots of the DOA-block CRLB diagonal at the true parameters (radians)."""
    theta = np.asarray(theta, dtype=float)
    theta_n, A = normalize_estimate(theta, scenario.steering_matrix(theta))
    phi = pack(A, theta_n, noise_variance_from_snr(snr_db))
    bound = crlb(phi, T).std()[phi.theta_slice]
    # restore the caller's DOA order
    order = np.argsort(wrap_angle(theta), kind="stable")
    out = np.empty_like(bound)
    out[order] = bound
    return out


# ---------------------------------------------------------------------------
# Likelihood, KLD and score
# ---------------------------------------------------------------------------

def _cholesky(R: np.ndarray, name: str):
    try:
        return scipy.linalg.cho_factor(R, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{name} is not positive definite") from exc


def _logdet(cf) -> float:
    return float(2.0 * np.sum(np.log(np.abs(np.diag(cf[0])))))


def log_likelihood(phi: ParamVector, ry_hat: np.ndarray, T: int) -> float:
    """L = -T (log det R_y + Tr(R_hat R_y^-1)), additive constant dropped."""
    cf = _cholesky(phi_covariance(phi), "R_y")
    trace = np.trace(scipy.linalg.cho_solve(cf, np.asarray(ry_hat, dtype=complex))).real
    return float(-T * (_logdet(cf) + trace))


def covariance_kld(R: np.ndarray, R_hat: np.ndarray) -> float:
    """KL divergence of CN(0, R_hat) from CN(0, R): log det R/det R_hat + Tr(R_hat R^-1) - n."""
    R_hat = np.asarray(R_hat, dtype=complex)
    cf = _cholesky(np.asarray(R, dtype=complex), "R_y")
    cf_hat = _cholesky(R_hat, "R_hat")
    trace = np.trace(scipy.linalg.cho_solve(cf, R_hat)).real
    n = R_hat.shape[0]
    value = _logdet(cf) - _logdet(cf_hat) + trace - n
    if value < -KLD_ROUNDOFF * n:
        raise np.linalg.LinAlgError(f"negative KL divergence {value:.3g}; covariances are numerically inconsistent")
    return float(max(value, 0.0))


def kld(phi: ParamVector, ry_hat: np.ndarray) -> float:
    return covariance_kld(phi_covariance(phi), ry_hat)


def score(phi: ParamVector, ry_hat: np.ndarray, T: int) -> np.ndarray:
    """dL/dphi_i = T Re[Tr(R^-1 dR_i R^-1 R_hat) - Tr(R^-1 dR_i)]."""
    R_inv, X = _whitened_gradients(phi)
    B = R_inv @ np.asarray(ry_hat, dtype=complex)
    s = np.einsum("kab,ba->k", X, B) - np.einsum("kaa->k", X)
    return T * np.real(s)


# ---------------------------------------------------------------------------
# Damped Fisher scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FsaOptions:
    max_iter: int = 200
    tol: float = 1e-9
    max_halvings: int = 20
    var_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.max_iter < 1 or self.max_halvings < 0:
            raise ValueError("max_iter must be >= 1 and max_halvings >= 0")
        if self.tol <= 0 or self.var_floor <= 0:
            raise ValueError("tol and var_floor must be positive")


@dataclass(frozen=True)
class FsaResult:
    """Final parameters (ascending DOAs) and the accepted log-likelihood trajectory."""

    params: ParamVector
    loglik_history: tuple[float, ...]
    iterations: int
    converged: bool
    flags: frozenset[str] = field(default_factory=frozenset)

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    @property
    def A(self) -> np.ndarray:
        return self.params.A

    @property
    def noise_var(self) -> float:
        return self.params.noise_var


def _fisher_step(J: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, bool]:
    """J^-1 s, falling back to the pseudo-inverse when J is singular."""
    cond = np.linalg.cond(J)
    if np.isfinite(cond) and cond <= COND_LIMIT:
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(J), s), False
        except np.linalg.LinAlgError:
            pass
    return scipy.linalg.pinvh(J) @ s, True


def _project(phi: ParamVector, values: np.ndarray, var_floor: float) -> ParamVector:
    """Wrap DOAs, clamp sigma^2 and flip columns whose first entry went negative."""
    values = np.array(values, dtype=float)
    M, D = phi.M, phi.D
    MD = M * D
    values[phi.theta_slice] = wrap_angle(values[phi.theta_slice])
    values[-1] = max(values[-1], var_floor)
    re = values[:MD].reshape((M, D), order="F")
    im = values[MD:2 * MD - D].reshape((M - 1, D), order="F")
    flip = np.where(re[0] < 0, -1.0, 1.0)
    values[:MD] = (re * flip).ravel(order="F")
    values[MD:2 * MD - D] = (im * flip).ravel(order="F")
    return phi.with_values(values)


def _safe_loglik(phi: ParamVector, ry_hat: np.ndarray, T: int) -> float:
    try:
        return log_likelihood(phi, ry_hat, T)
    except np.linalg.LinAlgError:
        return -np.inf


def fsa_run(
    phi0: ParamVector,
    ry_hat: np.ndarray,
    T: int,
    opts: FsaOptions = FsaOptions(),
) -> FsaResult:
    """
    Damped Fisher scoring phi <- phi + t J^-1 grad L, t halved until the
    log-likelihood does not decrease.
    """
    if phi0.noise_var <= 0:
        raise ValueError(f"initial noise variance must be > 0, got {phi0.noise_var}")
    ry_hat = np.asarray(ry_hat, dtype=complex)
    phi = phi0
    loglik = log_likelihood(phi, ry_hat, T)
    history = [loglik]
    flags: set[str] = set()
    converged = False
    iteration = 0

    while iteration < opts.max_iter:
        iteration += 1
        step, used_pinv = _fisher_step(fim(phi, T).J, score(phi, ry_hat, T))
        if used_pinv and "pinv_step" not in flags:
            logger.warning("singular FIM at iteration %d; taking a pseudo-inverse step", iteration)
            flags.add("pinv_step")
        scale = max(float(np.linalg.norm(phi.values)), np.finfo(float).tiny)

        t = 1.0
        accepted = None
        for _ in range(opts.max_halvings + 1):
            candidate = _project(phi, phi.values + t * step, opts.var_floor)
            value = _safe_loglik(candidate, ry_hat, T)
            if value >= loglik:
                accepted = candidate, value
                break
            t /= 2.0

        if accepted is None:
            flags.add("stalled")
            converged = float(np.linalg.norm(step)) < 1e-6 * scale
            logger.debug("FSA stalled at iteration %d (converged=%s)", iteration, converged)
            break

        phi, loglik = accepted
        history.append(loglik)
        if t * float(np.linalg.norm(step)) < opts.tol * scale:
            converged = True
            break

    if not converged and "stalled" not in flags:
        logger.debug("FSA hit the %d-iteration cap", opts.max_iter)

    A, theta, noise_var = unpack(phi)
    theta, A = normalize_estimate(theta, A)
    return FsaResult(
        params=pack(A, theta, noise_var),
        loglik_history=tuple(history),
        iterations=iteration,
        converged=converged,
        flags=frozenset(flags),
    )
