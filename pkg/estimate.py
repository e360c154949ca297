"""
Two-phase blind DOA estimation from one AVS batch.

empirical covariance -> noise variance -> denoised slabs -> EJD init ->
modified AC-DC (CPD estimate) -> Fisher scoring (KLD estimate).

Usable as a library (estimate_doas) or as a script on a saved 3M x T batch:

    python estimate.py data.npy --sources 3 -o result.json
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from covariance import covariance_stats
from cpd_acdc import AcdcSchedule, acdc_run, ejd_init
from gauss_ml import FsaOptions, fsa_run, pack

logger = logging.getLogger(__name__)

STAGES = ("ejd", "cpd", "kld")


@dataclass(frozen=True)
class EstimateOptions:
    """``last_stage`` stops the pipeline early ("ejd", "cpd" or "kld")."""

    schedule: AcdcSchedule = field(default_factory=AcdcSchedule)
    fsa: FsaOptions = field(default_factory=FsaOptions)
    last_stage: str = "kld"

    def __post_init__(self) -> None:
        if self.last_stage not in STAGES:
            raise ValueError(f"last_stage must be one of {STAGES}, got {self.last_stage!r}")


@dataclass(frozen=True)
class EstimationResult:
    """Estimates of every stage that ran; later stages are None when skipped."""

    noise_var: float
    theta_ejd: np.ndarray
    A_ejd: np.ndarray
    theta_cpd: np.ndarray | None = None
    A_cpd: np.ndarray | None = None
    cpd_converged: bool = False
    cpd_iterations: int = 0
    cost_history: tuple[float, ...] = ()
    theta_kld: np.ndarray | None = None
    A_kld: np.ndarray | None = None
    noise_var_kld: float | None = None
    kld_converged: bool = False
    kld_iterations: int = 0
    loglik_history: tuple[float, ...] = ()
    flags: frozenset[str] = frozenset()

    def stage(self, name: str) -> tuple[np.ndarray | None, np.ndarray | None, bool]:
        """
        (theta, A, converged) for one stage. EJD is closed form and always
        converged; KLD starts from the CPD estimate, so it only counts as
        converged when both iterative stages did.
        """
        if name == "ejd":
            return self.theta_ejd, self.A_ejd, True
        if name == "cpd":
            return self.theta_cpd, self.A_cpd, self.cpd_converged
        if name == "kld":
            return self.theta_kld, self.A_kld, self.kld_converged and self.cpd_converged
        raise ValueError(f"unknown stage {name!r}; expected one of {STAGES}")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"noise_var": self.noise_var, "flags": sorted(self.flags)}
        for name in STAGES:
            theta, _, converged = self.stage(name)
            if theta is None:
                continue
            out[name] = {
                "theta_rad": theta.tolist(),
                "theta_deg": np.degrees(theta).tolist(),
                "converged": converged,
            }
        if self.theta_cpd is not None:
            out["cpd"]["iterations"] = self.cpd_iterations
            out["cpd"]["final_cost"] = self.cost_history[-1] if self.cost_history else None
        if self.theta_kld is not None:
            out["kld"]["iterations"] = self.kld_iterations
            out["kld"]["noise_var"] = self.noise_var_kld
        return out


def estimate_doas(Y: np.ndarray, n_sources: int, opts: EstimateOptions = EstimateOptions()) -> EstimationResult:
    """Run the pipeline up to ``opts.last_stage`` on a 3M x T batch."""
    Y = np.asarray(Y, dtype=complex)
    if Y.ndim != 2 or Y.shape[0] % 3:
        raise ValueError(f"expected a 3M x T batch, got shape {Y.shape}")
    T = Y.shape[1]
    stats = covariance_stats(Y, n_sources)
    theta0, A0 = ejd_init(stats, n_sources)
    logger.debug("EJD: sigma^2=%.4g, DOAs %s deg", stats.noise_var, np.round(np.degrees(theta0), 2))
    result = EstimationResult(noise_var=stats.noise_var, theta_ejd=theta0, A_ejd=A0)
    if opts.last_stage == "ejd":
        return result

    state = acdc_run(stats, init=(theta0, A0), schedule=opts.schedule)
    flags = set() if state.converged else {"acdc_cap"}
    logger.debug("CPD: %d interleaves, cost %.6g, converged=%s", state.iteration, state.cost, state.converged)
    cpd = dict(
        theta_cpd=state.theta,
        A_cpd=state.A,
        cpd_converged=state.converged,
        cpd_iterations=state.iteration,
        cost_history=state.cost_history,
    )
    if opts.last_stage == "cpd":
        return EstimationResult(noise_var=stats.noise_var, theta_ejd=theta0, A_ejd=A0, flags=frozenset(flags), **cpd)

    phi0 = pack(state.A, state.theta, max(stats.noise_var, opts.fsa.var_floor))
    fit = fsa_run(phi0, stats.ry, T, opts.fsa)
    logger.debug("KLD: %d iterations, converged=%s, flags=%s", fit.iterations, fit.converged, sorted(fit.flags))
    return EstimationResult(
        noise_var=stats.noise_var,
        theta_ejd=theta0,
        A_ejd=A0,
        theta_kld=fit.theta,
        A_kld=fit.A,
        noise_var_kld=fit.noise_var,
        kld_converged=fit.converged,
        kld_iterations=fit.iterations,
        loglik_history=fit.loglik_history,
        flags=frozenset(flags | fit.flags),
        **cpd,
    )


def main() -> None:
    import argparse
    parser = argparse.ArgumentParser(description="Blind DOA estimation from a saved AVS batch (.npy, 3M x T complex).")
    parser.add_argument("input", type=Path, help="NumPy .npy file holding the 3M x T batch")
    parser.add_argument("-D", "--sources", type=int, required=True, help="Number of sources")
    parser.add_argument("-o", "--output", type=Path, default=None, help="Write the JSON result here (default: stdout)")
    parser.add_argument("--stage", choices=STAGES, default="kld", help="Last stage to run (default: kld)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )

    if not args.input.is_file():
        parser.error(f"not a file: {args.input}")
    try:
        Y = np.load(args.input)
    except (OSError, ValueError) as exc:
        parser.error(f"could not load {args.input}: {exc}")
    try:
        result = estimate_doas(Y, args.sources, EstimateOptions(last_stage=args.stage))
    except (ValueError, np.linalg.LinAlgError) as exc:
        print(f"Estimation failed: {exc}", file=sys.stderr)
        sys.exit(1)

    text = json.dumps(result.to_json(), indent=2)
    if args.output:
        args.output.parent.mkdir(parents=True, exist_ok=True)
        args.output.write_text(text + "\n", encoding="utf-8")
        print(f"Result written to {args.output}", file=sys.stderr)
    else:
        print(text)


if __name__ == "__main__":
    main()
