#!/usr/bin/env python3
"""
Monte-Carlo harness: run a preset (or JSON config) sweep of the blind DOA
estimators and write RMSE / ISR summaries for plotting.

For every sweep point and trial: synthesize a batch -> covariance -> EJD ->
modified AC-DC -> Fisher scoring. Each trial has its own RNG stream keyed by
(seed, point, trial), so results do not depend on the thread count.

Outputs in --out: rmse.csv, isr.csv (D >= 2), trials.jsonl, run.json.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
from joblib import Parallel, delayed

from cpd_acdc import normalize_estimate
from estimate import STAGES, EstimateOptions, estimate_doas
from gauss_ml import crlb_doa
from metrics import TrialRecord, align, circdist, isr, rmse
from presets import PRESETS, ExperimentConfig, build_scenario, get_preset
from sim import (
    ArrayScenario,
    NoiseSpec,
    SourceSpec,
    avs_manifold,
    generate_sources,
    noise_variance_from_snr,
    synthesize,
    trial_rng,
)

logger = logging.getLogger(__name__)

RMSE_HEADER = (
    "axis", "axis_value", "doa_index", "estimator", "rmse_rad", "rmse_deg",
    "std_env", "crlb_sqrt_rad", "trials", "failures",
)
ISR_HEADER = ("axis", "axis_value", "estimator", "i", "j", "isr_mean", "isr_std", "trials")


@dataclass(frozen=True)
class SummaryRow:
    axis: str
    axis_value: float
    doa_index: int
    estimator: str
    rmse_rad: float
    rmse_deg: float
    std_env: float
    crlb_sqrt_rad: float
    trials: int
    failures: int


@dataclass(frozen=True)
class IsrRow:
    axis: str
    axis_value: float
    estimator: str
    i: int
    j: int
    isr_mean: float
    isr_std: float
    trials: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[TrialRecord] = field(default_factory=list)
    summary: list[SummaryRow] = field(default_factory=list)
    isr_summary: list[IsrRow] = field(default_factory=list)
    wall_time: float = 0.0


def _last_stage(estimators: list[str]) -> str:
    return max(estimators, key=STAGES.index)


def run_trial(
    config: ExperimentConfig,
    scenario: ArrayScenario,
    point: int,
    trial: int,
    T: int,
    snr_db: float,
) -> list[TrialRecord]:
    """One trial at one sweep point: a record per requested estimator."""
    rng = trial_rng(config.seed, point, trial)
    theta = config.theta
    A_true = scenario.steering_matrix(theta)
    abar = avs_manifold(A_true, theta).matrix
    S = generate_sources(SourceSpec(config.sources, config.D, T), rng)
    Y = synthesize(abar, S, NoiseSpec(config.noise, noise_variance_from_snr(snr_db)), rng)
    axis_value = float(T if config.axis == "T" else snr_db)

    def record(estimator: str, **kwargs: Any) -> TrialRecord:
        return TrialRecord(
            scenario=config.name, axis=config.axis, axis_value=axis_value, trial=trial,
            estimator=estimator, T=T, snr_db=snr_db, **kwargs,
        )

    start = time.perf_counter()
    try:
        result = estimate_doas(Y, config.D, EstimateOptions(last_stage=_last_stage(config.estimators)))
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.debug("trial %d at point %d failed: %s", trial, point, exc)
        seconds = time.perf_counter() - start
        return [record(name, converged=False, error=str(exc), seconds=seconds) for name in config.estimators]
    seconds = time.perf_counter() - start

    _, A_ref = normalize_estimate(theta, A_true)
    records = []
    for name in config.estimators:
        theta_hat, A_hat, converged = result.stage(name)
        theta_p, A_p, _ = align(theta_hat, theta, A_hat)
        ratios = None
        if config.D >= 2:
            try:
                ratios = isr(A_p, A_ref)
            except np.linalg.LinAlgError:
                ratios = None
        iterations = {"cpd": result.cpd_iterations, "kld": result.kld_iterations}.get(name, 0)
        records.append(record(
            name,
            errors=circdist(theta_p, theta),
            theta_hat=theta_p,
            isr=ratios,
            converged=converged,
            iterations=iterations,
            flags=tuple(sorted(result.flags)),
            seconds=seconds,
        ))
    return records


def _crlb_column(scenario: ArrayScenario, config: ExperimentConfig, T: int, snr_db: float) -> np.ndarray:
    try:
        return crlb_doa(scenario, config.theta, snr_db, T)
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("CRLB unavailable at T=%d, SNR=%g dB: %s", T, snr_db, exc)
        return np.full(config.D, np.nan)


def _summarize_point(
    config: ExperimentConfig,
    axis_value: float,
    records: list[TrialRecord],
    bound: np.ndarray,
) -> tuple[list[SummaryRow], list[IsrRow]]:
    rows: list[SummaryRow] = []
    isr_rows: list[IsrRow] = []
    for name in config.estimators:
        mine = [r for r in records if r.estimator == name]
        for d in range(config.D):
            try:
                s = rmse(mine, d)
                stats = (s.rmse_rad, s.rmse_deg, s.std_env, s.failures)
            except ValueError:
                stats = (np.nan, np.nan, np.nan, len(mine))
            rows.append(SummaryRow(
                axis=config.axis, axis_value=axis_value, doa_index=d, estimator=name,
                rmse_rad=stats[0], rmse_deg=stats[1], std_env=stats[2],
                crlb_sqrt_rad=float(bound[d]), trials=len(mine), failures=stats[3],
            ))
        ratios = [r.isr for r in mine if r.ok and r.isr is not None]
        if not ratios:
            continue
        stack = np.stack(ratios)
        for i in range(config.D):
            for j in range(config.D):
                if i == j:
                    continue
                isr_rows.append(IsrRow(
                    axis=config.axis, axis_value=axis_value, estimator=name, i=i, j=j,
                    isr_mean=float(stack[:, i, j].mean()), isr_std=float(stack[:, i, j].std()),
                    trials=len(ratios),
                ))
    return rows, isr_rows


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every sweep point of ``config``; deterministic given config.seed."""
    started = time.perf_counter()
    scenario = build_scenario(config.array)
    result = ExperimentResult(config=config)
    points = config.points()
    total = len(points)

    for k, (T, snr_db) in enumerate(points):
        axis_value = float(T if config.axis == "T" else snr_db)
        logger.info("[%d/%d] %s %s=%g: %d trials", k + 1, total, config.name, config.axis, axis_value, config.trials)
        if config.estimators:
            batches = Parallel(n_jobs=config.threads, prefer="threads")(
                delayed(run_trial)(config, scenario, k, trial, T, snr_db) for trial in range(config.trials)
            )
        else:
            batches = []
        records = sorted((r for batch in batches for r in batch), key=lambda r: (r.trial, STAGES.index(r.estimator)))
        bound = _crlb_column(scenario, config, T, snr_db)
        rows, isr_rows = _summarize_point(config, axis_value, records, bound)
        failed = sum(1 for r in records if not r.ok)
        if failed:
            logger.info("[%d/%d] %d of %d estimator runs failed", k + 1, total, failed, len(records))
        result.records.extend(records)
        result.summary.extend(rows)
        result.isr_summary.extend(isr_rows)

    result.wall_time = time.perf_counter() - started
    return result


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return "nan" if np.isnan(value) else f"{value:.12g}"
    return str(value)


def _write_csv(path: Path, header: tuple[str, ...], rows: list[Any]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(getattr(row, col)) for col in header])


def _versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "pydantic", "joblib"):
        try:
            versions[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            versions[pkg] = "unknown"
    return versions


def emit(result: ExperimentResult, out_dir: Path | None = None) -> list[Path]:
    """Write rmse.csv, isr.csv, trials.jsonl and run.json; returns the written paths."""
    config = result.config
    if not config.estimators:
        raise ValueError("estimator set is empty; nothing to emit")
    if not result.summary:
        raise ValueError("summary is empty; nothing to emit")
    out_dir = Path(out_dir or config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out_dir}")

    written = []
    rmse_path = out_dir / "rmse.csv"
    _write_csv(rmse_path, RMSE_HEADER, result.summary)
    written.append(rmse_path)

    if result.isr_summary:
        isr_path = out_dir / "isr.csv"
        _write_csv(isr_path, ISR_HEADER, result.isr_summary)
        written.append(isr_path)

    trials_path = out_dir / "trials.jsonl"
    with trials_path.open("w", encoding="utf-8") as fh:
        for r in result.records:
            fh.write(json.dumps(r.to_json()) + "\n")
    written.append(trials_path)

    manifest_path = out_dir / "run.json"
    manifest = {
        "config": config.model_dump(mode="json"),
        "seed": config.seed,
        "versions": _versions(),
        "wall_time_s": round(result.wall_time, 3),
        "files": [p.name for p in written],
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    written.append(manifest_path)
    return written


def load_config(path: Path) -> ExperimentConfig:
    text = path.read_text(encoding="utf-8")
    data = json.loads(text)
    # run.json manifests nest the config
    if "config" in data and "name" not in data:
        return ExperimentConfig.model_validate(data["config"])
    return ExperimentConfig.model_validate_json(text)


def main() -> None:
    import argparse
    parser = argparse.ArgumentParser(
        description="Monte-Carlo RMSE/ISR sweeps of the blind AVS DOA estimators.",
    )
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=sorted(PRESETS), help="Named scenario preset")
    source.add_argument("--config", type=Path, help="JSON file mirroring ExperimentConfig (or a run.json)")
    parser.add_argument("--trials", type=int, default=None, help="Trials per sweep point (default: 200)")
    parser.add_argument("--seed", type=int, default=None, help="Master seed (default: 0)")
    parser.add_argument("--out", type=Path, default=None, help="Output directory (default: results)")
    parser.add_argument(
        "--estimators",
        default=None,
        help="Comma-separated subset of ejd,cpd,kld (default: all three)",
    )
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )

    try:
        config = get_preset(args.preset) if args.preset else load_config(args.config)
    except (OSError, ValueError) as exc:
        parser.error(f"could not load configuration: {exc}")

    overrides: dict[str, Any] = {}
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.estimators is not None:
        overrides["estimators"] = [e.strip() for e in args.estimators.split(",") if e.strip()]
    if overrides:
        try:
            config = ExperimentConfig.model_validate({**config.model_dump(), **overrides})
        except ValueError as exc:
            parser.error(str(exc))
    if not config.estimators:
        parser.error("--estimators must name at least one of ejd,cpd,kld")

    total = len(config.points())
    logger.info("[0/%d] %s: %s sweep over %s, %d trials/point, seed %d",
                total, config.name, config.axis, config.values, config.trials, config.seed)
    result = run_experiment(config)
    written = emit(result)
    logger.info("[%d/%d] Done in %.1fs. Output in %s: %s",
                total, total, result.wall_time, config.out, ", ".join(p.name for p in written))


if __name__ == "__main__":
    main()
