"""
Scoring estimates against ground truth: permutation alignment, circular
DOA errors, per-DOA RMSE and the interference-to-source ratio.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

MAX_ALIGN_SOURCES = 6


def circdist(a, b) -> np.ndarray:
    """Signed circular error a - b wrapped into (-pi, pi]."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.pi - (np.pi - diff) % (2.0 * np.pi)


def align(theta_hat, theta_true, A_hat: np.ndarray | None = None):
    """
    Permute the estimate to best match the truth.

    Returns (theta_p, A_p, perm) where theta_p[d] = theta_hat[perm[d]] minimizes
    the summed squared circular error; A_hat columns follow the same permutation.
    """
    theta_hat = np.asarray(theta_hat, dtype=float).reshape(-1)
    theta_true = np.asarray(theta_true, dtype=float).reshape(-1)
    D = theta_true.size
    if theta_hat.size != D:
        raise ValueError(f"cannot align {theta_hat.size} estimates with {D} true DOAs")
    if D > MAX_ALIGN_SOURCES:
        raise ValueError(f"exhaustive alignment supports at most {MAX_ALIGN_SOURCES} sources, got {D}")

    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(D)):
        cost = float(np.sum(circdist(theta_hat[list(perm)], theta_true) ** 2))
        if cost < best_cost:
            best, best_cost = perm, cost
    perm = np.array(best)
    A_p = None if A_hat is None else np.asarray(A_hat)[:, perm]
    return theta_hat[perm], A_p, perm


@dataclass
class TrialRecord:
    """One estimator's outcome on one Monte-Carlo trial."""

    scenario: str
    axis: str
    axis_value: float
    trial: int
    estimator: str
    T: int
    snr_db: float
    errors: np.ndarray | None = None
    theta_hat: np.ndarray | None = None
    isr: np.ndarray | None = None
    converged: bool = True
    iterations: int = 0
    flags: tuple[str, ...] = ()
    error: str | None = None
    seconds: float = 0.0

    def __post_init__(self) -> None:
        if self.errors is not None:
            self.errors = circdist(self.errors, 0.0)
        if self.isr is not None and np.any(np.asarray(self.isr) < 0):
            raise ValueError("ISR values must be non-negative")

    @property
    def ok(self) -> bool:
        return self.converged and self.error is None and self.errors is not None

    def to_json(self) -> dict[str, Any]:
        def _list(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "scenario": self.scenario,
            "axis": self.axis,
            "axis_value": self.axis_value,
            "trial": self.trial,
            "estimator": self.estimator,
            "T": self.T,
            "snr_db": self.snr_db,
            "errors_rad": _list(self.errors),
            "theta_hat_rad": _list(self.theta_hat),
            "isr": _list(self.isr),
            "converged": self.converged,
            "iterations": self.iterations,
            "flags": list(self.flags),
            "error": self.error,
            "seconds": round(self.seconds, 6),
        }


@dataclass(frozen=True)
class RmseSummary:
    rmse_rad: float
    std_env: float
    n: int
    failures: int = 0

    @property
    def rmse_deg(self) -> float:
        return float(np.degrees(self.rmse_rad))


def rmse(records: Iterable[TrialRecord], d: int) -> RmseSummary:
    """
    Circular RMSE of DOA ``d`` over the successful records.

    ``std_env`` is the standard deviation of the per-trial squared error
    divided by sqrt(n), in rad^2.
    """
    records = list(records)
    ok = [r for r in records if r.ok]
    if not ok:
        raise ValueError("no successful records to compute an RMSE from")
    sq = np.array([float(r.errors[d]) ** 2 for r in ok])
    n = sq.size
    return RmseSummary(
        rmse_rad=float(np.sqrt(sq.mean())),
        std_env=float(sq.std() / np.sqrt(n)),
        n=n,
        failures=len(records) - n,
    )


def isr(A_hat: np.ndarray, A_true: np.ndarray) -> np.ndarray:
    """ISR_ij = |G_ij|^2 / |G_ii|^2 with G = pinv(A_hat) A_true; zero diagonal."""
    A_hat = np.asarray(A_hat, dtype=complex)
    A_true = np.asarray(A_true, dtype=complex)
    if A_hat.shape != A_true.shape:
        raise ValueError(f"shape mismatch: {A_hat.shape} vs {A_true.shape}")
    D = A_hat.shape[1]
    if np.linalg.matrix_rank(A_hat) < D:
        raise np.linalg.LinAlgError("estimated steering matrix is rank deficient")
    power = np.abs(np.linalg.pinv(A_hat) @ A_true) ** 2
    out = power / np.diag(power)[:, None]
    np.fill_diagonal(out, 0.0)
    return out
