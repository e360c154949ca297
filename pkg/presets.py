"""
Experiment configuration and the named scenario presets.

A config is either one of PRESETS or a JSON file with the same field names,
loaded through ExperimentConfig.model_validate_json.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from metrics import MAX_ALIGN_SOURCES
from sim import ArrayScenario, NoiseKind, SourceKind, as_doa_vector, draw_perturbations

Estimator = Literal["ejd", "cpd", "kld"]
ESTIMATORS: tuple[str, ...] = ("ejd", "cpd", "kld")
DEFAULT_TRIALS = 200


class ArrayConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    geometry: Literal["ula", "uca"]
    M: int = Field(ge=2)
    spacing: float = Field(default=0.5, gt=0)  # wavelengths, ULA
    radius: float = Field(default=0.5, gt=0)  # wavelengths, UCA
    faulty: list[int] = Field(default_factory=list)  # 1-based sensor numbers
    perturbed: bool = False
    perturbation_seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> ArrayConfig:
        if self.geometry == "uca" and self.M < 3:
            raise ValueError("UCA needs at least 3 sensors")
        bad = [f for f in self.faulty if not 1 <= f <= self.M]
        if bad:
            raise ValueError(f"faulty sensors must be in 1..{self.M}, got {bad}")
        return self


class ExperimentConfig(BaseModel):
    """One Monte-Carlo sweep over sample size or SNR."""

    model_config = ConfigDict(extra="forbid")

    name: str
    array: ArrayConfig
    doas_deg: list[float]
    sources: SourceKind = "cn"
    noise: NoiseKind = "cn"
    axis: Literal["T", "snr"]
    values: list[float]
    T: int | None = Field(default=None, gt=0)  # fixed sample size for SNR sweeps
    snr_db: float | None = None  # fixed SNR for T sweeps
    trials: int = Field(default=DEFAULT_TRIALS, ge=1)
    seed: int = 0
    estimators: list[Estimator] = Field(default_factory=lambda: list(ESTIMATORS))
    threads: int = Field(default=1, ge=1)
    out: Path = Path("results")

    @field_validator("values")
    @classmethod
    def _non_empty(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("sweep values must not be empty")
        return v

    @field_validator("estimators")
    @classmethod
    def _unique(cls, v: list[str]) -> list[str]:
        if len(set(v)) != len(v):
            raise ValueError(f"duplicate estimators in {v}")
        return v

    @model_validator(mode="after")
    def _check(self) -> ExperimentConfig:
        as_doa_vector(np.radians(self.doas_deg))
        D = len(self.doas_deg)
        if D >= self.array.M:
            raise ValueError(f"need fewer sources than sensors, got D={D}, M={self.array.M}")
        if D > MAX_ALIGN_SOURCES:
            raise ValueError(f"error alignment supports at most {MAX_ALIGN_SOURCES} sources, got D={D}")
        if self.axis == "T":
            if self.snr_db is None:
                raise ValueError("a T sweep needs a fixed snr_db")
            if any(v < 1 or v != int(v) for v in self.values):
                raise ValueError(f"sample sizes must be positive integers, got {self.values}")
        elif self.T is None:
            raise ValueError("an SNR sweep needs a fixed T")
        return self

    @property
    def theta(self) -> np.ndarray:
        return np.radians(self.doas_deg)

    @property
    def D(self) -> int:
        return len(self.doas_deg)

    def points(self) -> list[tuple[int, float]]:
        """(T, SNR dB) for every sweep value, in sweep order."""
        if self.axis == "T":
            return [(int(v), float(self.snr_db)) for v in self.values]
        return [(int(self.T), float(v)) for v in self.values]


def build_scenario(array: ArrayConfig) -> ArrayScenario:
    """ArrayScenario for a config; perturbations are drawn once from perturbation_seed."""
    scenario = ArrayScenario(
        geometry=array.geometry,
        M=array.M,
        spacing=array.spacing,
        radius=array.radius,
        faulty=frozenset(array.faulty),
    )
    if array.perturbed:
        scenario = draw_perturbations(scenario, np.random.default_rng(array.perturbation_seed))
    return scenario


_ULA7 = ArrayConfig(geometry="ula", M=7)
_ULA7_UNCALIBRATED = ArrayConfig(geometry="ula", M=7, perturbed=True, perturbation_seed=2020)
_UCA5_FAULTY = ArrayConfig(geometry="uca", M=5, faulty=[2, 4])
_ULA_DOAS = [-56.0, 43.0, 71.0]
_UCA_DOAS = [24.0, 92.0]
_T_SWEEP = [100, 300, 1000, 3000, 10000]
_SNR_SWEEP = [-5, 0, 5, 10, 15, 20]

PRESETS: dict[str, ExperimentConfig] = {
    "fig1a": ExperimentConfig(
        name="fig1a", array=_ULA7, doas_deg=_ULA_DOAS, sources="cn", noise="cn",
        axis="T", values=_T_SWEEP, snr_db=10.0,
    ),
    "fig1b": ExperimentConfig(
        name="fig1b", array=_ULA7, doas_deg=_ULA_DOAS, sources="cn", noise="cn",
        axis="snr", values=_SNR_SWEEP, T=100,
    ),
    "fig2": ExperimentConfig(
        name="fig2", array=_ULA7_UNCALIBRATED, doas_deg=_ULA_DOAS, sources="qpsk", noise="laplace",
        axis="T", values=_T_SWEEP, snr_db=5.0,
    ),
    "fig3": ExperimentConfig(
        name="fig3", array=_UCA5_FAULTY, doas_deg=_UCA_DOAS, sources="gmm", noise="cn",
        axis="snr", values=_SNR_SWEEP, T=500,
    ),
    "fig3a": ExperimentConfig(
        name="fig3a", array=_UCA5_FAULTY, doas_deg=_UCA_DOAS, sources="gmm", noise="cn",
        axis="T", values=_T_SWEEP, snr_db=0.0,
    ),
    "fig4": ExperimentConfig(
        name="fig4", array=_UCA5_FAULTY, doas_deg=_UCA_DOAS, sources="gmm", noise="cn",
        axis="T", values=[100, 300, 1000, 3000], snr_db=0.0,
    ),
}


def get_preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name].model_copy(deep=True)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
