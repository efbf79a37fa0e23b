"""Regression-discontinuity machinery around the generic-entry date:
splitting patients into eras at the cutoff, kernel-weighted resampling of
era baselines so that simulated cohorts reflect initiators near the
cutoff, and empirical positivity diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .domain import BRAND, GENERIC, PatientHistory, Regime, adherence_prefix, regime_cost_path
from .stats import kernel_weight

__all__ = [
    "ERA_BRAND",
    "ERA_GENERIC",
    "CutoffDesign",
    "split_eras",
    "BaselineSampler",
    "PositivityReport",
    "positivity_diagnostics",
]

ERA_BRAND = "brand"
ERA_GENERIC = "generic"


@dataclass(frozen=True)
class CutoffDesign:
    """Sharp cutoff at ``u_star``: initiations before it form the brand
    era, initiations on or after it the generic era.  ``h`` is the kernel
    bandwidth in days; ``exclusion`` drops brand initiators from the
    generic era (the sharp design) rather than keeping them."""

    u_star: int
    h: float
    exclusion: bool = True

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("bandwidth h must be positive")


def split_eras(
    histories: Sequence[PatientHistory],
    design: CutoffDesign,
) -> tuple[list[PatientHistory], list[PatientHistory], list[PatientHistory]]:
    """Partition patients into (brand era, generic era, excluded).

    Brand initiators on or after the cutoff are excluded under the sharp
    design (kept in the generic era when ``design.exclusion`` is off).
    Generic initiators dated before the cutoff are contradictory — the
    product did not exist — and are always excluded, with a warning.
    """
    brand_era: list[PatientHistory] = []
    generic_era: list[PatientHistory] = []
    excluded: list[PatientHistory] = []
    impossible = 0
    for hist in histories:
        if hist.u < design.u_star:
            if hist.arm == BRAND:
                brand_era.append(hist)
            else:
                impossible += 1
                excluded.append(hist)
        else:
            if hist.arm == GENERIC:
                generic_era.append(hist)
            elif design.exclusion:
                excluded.append(hist)
            else:
                generic_era.append(hist)
    if impossible:
        warnings.warn(
            f"{impossible} generic initiator(s) dated before the cutoff were excluded; "
            "check the initiation dates",
            stacklevel=2,
        )
    if not brand_era:
        raise ValueError("no patients in the brand era")
    if not generic_era:
        raise ValueError("no patients in the generic era")
    return brand_era, generic_era, excluded


class BaselineSampler:
    """Samples era patients with replacement, with probability proportional
    to a gaussian kernel in the distance of their initiation date from the
    cutoff — realizing a baseline distribution local to the cutoff.

    ``multiplicity`` (optional, one integer per patient) scales each
    patient's weight, so a resampled data set can reuse the same sampler.
    """

    def __init__(
        self,
        histories: Sequence[PatientHistory],
        design: CutoffDesign,
        multiplicity: np.ndarray | None = None,
    ):
        if len(histories) == 0:
            raise ValueError("cannot sample baselines from an empty era")
        self.histories = list(histories)
        self.design = design
        u = np.array([h.u for h in self.histories], dtype=float)
        w = kernel_weight(u, design.u_star, design.h)
        if multiplicity is not None:
            m = np.asarray(multiplicity, dtype=float)
            if m.shape != w.shape or np.any(m < 0):
                raise ValueError("multiplicity must be one non-negative count per patient")
            w = w * m
        total = w.sum()
        if total <= 0.0 or not np.isfinite(total):
            raise ValueError(
                "all kernel weights underflowed to zero; initiation dates are too far "
                f"from the cutoff for bandwidth h={design.h:g} — use a larger h"
            )
        self.weights = w
        self.probs = w / total

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` patient indices into the era list."""
        return rng.choice(len(self.histories), size=size, replace=True, p=self.probs)


@dataclass
class PositivityReport:
    """Day-by-day empirical support for the sustained regime in one era:
    how many patients are still in follow-up, how many of those are still
    following the regime, and how many were censored that day.  ``flag_day``
    is the first day with no regime-followers left (beyond which the
    simulation extrapolates), or None."""

    era: str
    at_risk: np.ndarray
    adherent: np.ndarray
    censored: np.ndarray
    flag_day: int | None

    def to_frame(self) -> pd.DataFrame:
        days = np.arange(1, len(self.at_risk) + 1)
        return pd.DataFrame(
            {
                "era": self.era,
                "day": days,
                "at_risk": self.at_risk,
                "adherent": self.adherent,
                "censored": self.censored,
                "flag": (days == self.flag_day) if self.flag_day is not None else False,
            }
        )


def positivity_diagnostics(
    histories: Sequence[PatientHistory],
    regime: Regime,
    horizon: int,
    era: str = "",
    strict: bool = False,
) -> PositivityReport:
    """Count, for each day, the patients at risk and those still following
    the regime.

    By default "following" means the dispensed form matches the regime arm
    every day so far; ``strict`` additionally requires the cumulative
    out-of-pocket cost to track the regime's fill schedule exactly.
    """
    at_risk = np.zeros(horizon, dtype=int)
    adherent = np.zeros(horizon, dtype=int)
    censored = np.zeros(horizon, dtype=int)
    for h in histories:
        y = min(h.y, horizon)
        at_risk[:y] += 1
        if strict:
            prefix = adherence_prefix(h, regime)
        else:
            off = np.flatnonzero(h.z1 != regime.arm)
            prefix = int(off[0]) if off.size else h.y
        adherent[: min(prefix, horizon)] += 1
        if h.delta == 0 and h.y <= horizon:
            censored[h.y - 1] += 1
    zero = np.flatnonzero(adherent == 0)
    flag_day = int(zero[0]) + 1 if zero.size else None
    return PositivityReport(
        era=era, at_risk=at_risk, adherent=adherent, censored=censored, flag_day=flag_day
    )
