"""
Phase 1: blind DOA estimate from the CPD of the covariance tensor.

The denoised covariance is fitted by sum_d F(theta_d) (x) a_d a_d^H in the
least-squares sense. The fit alternates between

* AC updates: one steering column at a time, closed form via the top
  eigenpair of a Hermitian M x M matrix;
* modified DC updates: one DOA at a time, the global minimizer of a
  trigonometric cost found among the real roots of a quartic.

Both steps are exact coordinate minimizers, so the cost never increases.
Initialization comes from an exact joint diagonalization (EJD) of two
matrices spanning the slab space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from covariance import CovarianceStats
from sim import avs_manifold, c_matrix, wrap_angle

logger = logging.getLogger(__name__)

# The six distinct slab pairs and their weights 2 - delta_ij.
PAIRS: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
PAIR_WEIGHTS: tuple[float, ...] = tuple(1.0 if i == j else 2.0 for i, j in PAIRS)

ROOT_IMAG_TOL = 1e-8
STATIONARY_TOL = 1e-8
LEADING_COEFF_TOL = 1e-12
TIE_TOL = 1e-12
EJD_COND_LIMIT = 1e12
EJD_REGULARIZATION = 1e-10


@dataclass(frozen=True)
class CpdState:
    """Current phase-1 iterate."""

    A: np.ndarray
    theta: np.ndarray
    cost: float
    iteration: int = 0
    cost_history: tuple[float, ...] = ()
    converged: bool = False

    @property
    def D(self) -> int:
        return self.theta.size


@dataclass(frozen=True)
class AcdcSchedule:
    """Interleaving of AC sweeps and modified DC phases, plus stopping rule."""

    ac_sweeps: int = 1
    dc_sweeps: int = 1
    max_interleaves: int = 500
    tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.ac_sweeps < 1 or self.dc_sweeps < 1 or self.max_interleaves < 1:
            raise ValueError("sweep counts and max_interleaves must be >= 1")


# ---------------------------------------------------------------------------
# LS cost
# ---------------------------------------------------------------------------

def cls_cost(theta, A: np.ndarray, stats: CovarianceStats) -> float:
    """
    Weighted six-slab LS cost sum (2 - delta_ij) ||A D_ij A^H - S_ij||_F^2.

    With symmetric slabs this is the Frobenius distance between the model
    Abar Abar^H and the assembled slab matrix.
    """
    abar = avs_manifold(A, theta).matrix
    diff = abar @ abar.conj().T - stats.rx_sym
    return float(np.sum(diff.real ** 2 + diff.imag ** 2))


# ---------------------------------------------------------------------------
# Modified DC phase
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DcConstants:
    """dC/dtheta_d = alpha cos - beta sin + gamma cos2 - delta sin2."""

    alpha: float
    beta: float
    gamma: float
    delta: float

    @property
    def magnitude(self) -> float:
        return abs(self.alpha) + abs(self.beta) + abs(self.gamma) + abs(self.delta)

    def derivative(self, theta):
        return (
            self.alpha * np.cos(theta)
            - self.beta * np.sin(theta)
            + self.gamma * np.cos(2.0 * theta)
            - self.delta * np.sin(2.0 * theta)
        )

    def second_derivative(self, theta):
        return (
            -self.alpha * np.sin(theta)
            - self.beta * np.cos(theta)
            - 2.0 * self.gamma * np.sin(2.0 * theta)
            - 2.0 * self.delta * np.cos(2.0 * theta)
        )

    def quartic(self) -> np.ndarray:
        """Coefficients (highest first) of the stationarity equation in tau = tan(theta/2)."""
        a, b, g, d = self.alpha, self.beta, self.gamma, self.delta
        return np.array([g - a, 4.0 * d - 2.0 * b, -6.0 * g, -(2.0 * b + 4.0 * d), a + g])


def dc_constants(d: int, theta, A: np.ndarray, stats: CovarianceStats) -> DcConstants:
    """Constants of the single-DOA cost derivative for source d."""
    theta = np.asarray(theta, dtype=float)
    a = A[:, d]
    g = np.abs(A.conj().T @ a) ** 2
    g[d] = 0.0

    def q(i: int, j: int) -> float:
        return float(np.real(a.conj() @ stats.slabs[i, j] @ a))

    return DcConstants(
        alpha=float(4.0 * np.sum(g * np.sin(theta)) - 4.0 * q(0, 2)),
        beta=float(4.0 * np.sum(g * np.cos(theta)) - 4.0 * q(0, 1)),
        gamma=float(2.0 * np.sum(g * np.sin(2.0 * theta)) - 4.0 * q(1, 2)),
        delta=float(2.0 * np.sum(g * np.cos(2.0 * theta)) - 2.0 * (q(1, 1) - q(2, 2))),
    )


def _real_polynomial_roots(coeffs: np.ndarray) -> np.ndarray:
    """Real roots via companion-matrix eigenvalues, deflating negligible leading terms."""
    coeffs = np.asarray(coeffs, dtype=float)
    scale = np.abs(coeffs).max()
    if scale == 0:
        return np.empty(0)
    lead = np.flatnonzero(np.abs(coeffs) >= LEADING_COEFF_TOL * scale)[0]
    coeffs = coeffs[lead:]
    if coeffs.size < 2:
        return np.empty(0)
    roots = np.roots(coeffs)
    keep = np.abs(roots.imag) < ROOT_IMAG_TOL * (1.0 + np.abs(roots.real))
    return roots.real[keep]


def dc_stationary_angles(consts: DcConstants) -> list[float]:
    """Stationary points of the single-DOA cost in [-pi, pi)."""
    scale = consts.magnitude
    if scale == 0:
        return []
    bound = STATIONARY_TOL * (scale + np.finfo(float).eps)

    candidates = list(2.0 * np.arctan(_real_polynomial_roots(consts.quartic())))
    # tau = tan(theta/2) cannot represent theta = pi
    if abs(consts.derivative(np.pi)) < bound:
        candidates.append(np.pi)

    angles: list[float] = []
    for t in candidates:
        for _ in range(3):
            curv = consts.second_derivative(t)
            if curv == 0:
                break
            polished = t - consts.derivative(t) / curv
            if abs(consts.derivative(polished)) >= abs(consts.derivative(t)):
                break
            t = polished
        if abs(consts.derivative(t)) >= bound:
            continue
        t = float(wrap_angle(t))
        if all(abs(wrap_angle(t - u)) > 1e-10 for u in angles):
            angles.append(t)
    return sorted(angles)


def _circular_distance(a: float, b: float) -> float:
    return float(abs(wrap_angle(a - b)))


def modified_dc_sweep(state: CpdState, stats: CovarianceStats, n_sweeps: int = 1) -> CpdState:
    """Update each DOA in turn to the global minimizer of the single-DOA cost."""
    if n_sweeps < 1:
        raise ValueError(f"need at least one sweep, got {n_sweeps}")
    theta = np.array(state.theta, dtype=float)
    A = state.A
    cost = state.cost
    for _ in range(n_sweeps):
        for d in range(theta.size):
            consts = dc_constants(d, theta, A, stats)
            current = theta[d]
            options = [(current, cost)]
            for t in dc_stationary_angles(consts):
                trial = theta.copy()
                trial[d] = t
                options.append((t, cls_cost(trial, A, stats)))
            best = min(c for _, c in options)
            tol = TIE_TOL * max(abs(best), np.finfo(float).tiny)
            near = [(t, c) for t, c in options if c <= best + tol]
            t_new, c_new = min(near, key=lambda tc: _circular_distance(tc[0], current))
            theta[d] = t_new
            cost = c_new
    return replace(state, theta=theta, cost=cost)


# ---------------------------------------------------------------------------
# AC phase
# ---------------------------------------------------------------------------

def ac_column_update(state: CpdState, stats: CovarianceStats, d: int) -> CpdState:
    """Exact LS update of steering column d with everything else fixed."""
    A = np.array(state.A, dtype=complex)
    C = c_matrix(state.theta)
    # sum over pairs of w_ij F_ij(theta_d) F_ij(theta_l) is (c_d . c_l)^2
    coupling = (C[:, d] @ C) ** 2
    F_d = np.outer(C[:, d], C[:, d])
    P = np.einsum("ij,ijmn->mn", F_d, stats.slabs)
    others = [l for l in range(state.D) if l != d]
    if others:
        Ao = A[:, others]
        P = P - (Ao * coupling[others]) @ Ao.conj().T
    P = (P + P.conj().T) / 2.0
    weight = coupling[d]

    M = P.shape[0]
    mu, v = scipy.linalg.eigh(P, subset_by_index=[M - 1, M - 1])
    mu = float(mu[0])
    A[:, d] = np.sqrt(mu / weight) * v[:, 0] if mu > 0 else 0.0

    cost = cls_cost(state.theta, A, stats)
    if cost > state.cost:
        return state
    return replace(state, A=A, cost=cost)


def ac_sweep(state: CpdState, stats: CovarianceStats) -> CpdState:
    for d in range(state.D):
        state = ac_column_update(state, stats, d)
    return state


# ---------------------------------------------------------------------------
# EJD initialization
# ---------------------------------------------------------------------------

def svec(Q: np.ndarray) -> np.ndarray:
    """Real M^2-vector (diag; sqrt2 Re upper; sqrt2 Im upper) with svec(P).svec(Q) = Tr(PQ)."""
    Q = np.asarray(Q, dtype=complex)
    scale = max(np.abs(Q).max(), 1.0)
    if np.abs(Q - Q.conj().T).max() > 1e-8 * scale:
        raise ValueError("svec needs a Hermitian matrix")
    iu = np.triu_indices(Q.shape[0], 1)
    upper = Q[iu]
    return np.concatenate([np.diag(Q).real, np.sqrt(2.0) * upper.real, np.sqrt(2.0) * upper.imag])


def unsvec(v: np.ndarray) -> np.ndarray:
    """Inverse of svec."""
    v = np.asarray(v, dtype=float)
    M = int(round(np.sqrt(v.size)))
    if M * M != v.size:
        raise ValueError(f"svec length must be a square, got {v.size}")
    k = M * (M - 1) // 2
    iu = np.triu_indices(M, 1)
    upper = np.zeros((M, M), dtype=complex)
    upper[iu] = (v[M:M + k] + 1j * v[M + k:]) / np.sqrt(2.0)
    return np.diag(v[:M]).astype(complex) + upper + upper.conj().T


def extract_doa(c2: float, c3: float) -> float:
    """theta = atan2(sin, cos) in [-pi, pi)."""
    if c2 == 0 and c3 == 0:
        raise ValueError("cannot extract a DOA from a zero (cos, sin) pair")
    return float(wrap_angle(np.arctan2(c3, c2)))


def normalize_estimate(theta, A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Wrap and sort DOAs ascending, permute columns, make A's first row real >= 0."""
    theta = np.asarray(wrap_angle(np.asarray(theta, dtype=float)), dtype=float)
    order = np.argsort(theta, kind="stable")
    theta = theta[order]
    A = np.array(A, dtype=complex)[:, order]
    first = A[0]
    mag = np.abs(first)
    phase = np.ones_like(first)
    nz = mag > 0
    phase[nz] = first[nz].conj() / mag[nz]
    A = A * phase
    A[0] = mag
    return theta, A


def _dominant_inverse(P: np.ndarray, D: int, reg: float = 0.0) -> tuple[np.ndarray, float]:
    """Inverse of Hermitian P restricted to its D dominant eigen-directions."""
    w, V = scipy.linalg.eigh(P)
    idx = np.argsort(np.abs(w))[::-1][:D]
    w, V = w[idx] + reg, V[:, idx]
    smallest = np.abs(w).min()
    cond = np.inf if smallest == 0 else float(np.abs(w).max() / smallest)
    with np.errstate(divide="ignore"):
        inv = (V / w) @ V.conj().T
    return inv, cond


def ejd_init(stats: CovarianceStats, n_sources: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form initial (theta, A) from an exact joint diagonalization."""
    M = stats.M
    D = n_sources
    if not 1 <= D < M:
        raise ValueError(f"EJD needs 1 <= D < M, got D={D}, M={M}")

    vecs = np.stack([svec(stats.slabs[i, j]) for i, j in PAIRS])
    _, U = scipy.linalg.eigh(vecs.T @ vecs)
    P1, P2 = unsvec(U[:, -1]), unsvec(U[:, -2])
    if D == 1:
        # every slab is a multiple of a a^H, so P1 alone carries the column
        w, V = scipy.linalg.eigh(P1)
        return _ejd_finish(V[:, [int(np.argmax(np.abs(w)))]], stats)

    inv, cond = _dominant_inverse(P2, D)
    if cond > EJD_COND_LIMIT:
        inv_swapped, cond_swapped = _dominant_inverse(P1, D)
        if cond_swapped <= EJD_COND_LIMIT:
            logger.debug("EJD: swapping the matrix pencil (cond %.3g)", cond)
            P1, P2, inv = P2, P1, inv_swapped
        else:
            logger.warning("EJD: both pencil matrices ill-conditioned; regularizing")
            inv, _ = _dominant_inverse(P2, D, reg=EJD_REGULARIZATION * np.linalg.norm(P2, 2))

    vals, V = np.linalg.eig(P1 @ inv)
    order = np.argsort(np.abs(vals))[::-1][:D]
    mags = np.abs(vals[order])
    if mags[0] == 0 or mags[-1] <= 1e-12 * mags[0]:
        raise np.linalg.LinAlgError(f"EJD found fewer than {D} usable eigenvectors")
    return _ejd_finish(V[:, order], stats)


def _ejd_finish(A: np.ndarray, stats: CovarianceStats) -> tuple[np.ndarray, np.ndarray]:
    """DOAs and column scales from the diagonalized slabs of unit-norm columns A."""
    D = A.shape[1]
    _, A = normalize_estimate(np.zeros(D), A)

    pinv = np.linalg.pinv(A)
    diag = [np.real(np.diag(pinv @ stats.slabs[0, j] @ pinv.conj().T)) for j in range(3)]
    theta = np.array([extract_doa(diag[1][d], diag[2][d]) for d in range(D)])
    A = A * np.sqrt(np.maximum(diag[0], 0.0))
    return normalize_estimate(theta, A)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _revive_collapsed_columns(theta: np.ndarray, A: np.ndarray, stats: CovarianceStats) -> np.ndarray:
    A = np.array(A, dtype=complex)
    for d in range(A.shape[1]):
        if np.any(A[:, d] != 0):
            continue
        others = [l for l in range(A.shape[1]) if l != d]
        residual = stats.slabs[0, 0] - A[:, others] @ A[:, others].conj().T
        M = residual.shape[0]
        mu, v = scipy.linalg.eigh((residual + residual.conj().T) / 2.0, subset_by_index=[M - 1, M - 1])
        if mu[0] > 0:
            logger.debug("reinitializing collapsed steering column %d", d)
            A[:, d] = np.sqrt(mu[0]) * v[:, 0]
    return A


def acdc_run(
    stats: CovarianceStats,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    schedule: AcdcSchedule = AcdcSchedule(),
    n_sources: int | None = None,
) -> CpdState:
    """
    Modified AC-DC from ``init`` (EJD when omitted) until the relative cost
    decrease over one interleave falls below ``schedule.tol``.
    """
    if init is None:
        if n_sources is None:
            raise ValueError("acdc_run needs either init or n_sources")
        init = ejd_init(stats, n_sources)
    theta, A = init
    theta = np.asarray(theta, dtype=float)
    A = _revive_collapsed_columns(theta, A, stats)

    cost = cls_cost(theta, A, stats)
    floor = 1e-24 * max(float(np.sum(np.abs(stats.rx_sym) ** 2)), np.finfo(float).tiny)
    history = [cost]
    state = CpdState(A=A, theta=theta, cost=cost)
    converged = cost <= floor
    iteration = 0
    while not converged and iteration < schedule.max_interleaves:
        iteration += 1
        previous = state.cost
        for _ in range(schedule.ac_sweeps):
            state = ac_sweep(state, stats)
        state = modified_dc_sweep(state, stats, schedule.dc_sweeps)
        history.append(state.cost)
        converged = state.cost <= floor or previous - state.cost <= schedule.tol * previous

    if not converged:
        logger.debug("AC-DC stopped at the %d-interleave cap (cost %.6g)", iteration, state.cost)
    theta, A = normalize_estimate(state.theta, state.A)
    return CpdState(
        A=A,
        theta=theta,
        cost=state.cost,
        iteration=iteration,
        cost_history=tuple(history),
        converged=converged,
    )
