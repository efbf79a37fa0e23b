"""Nonparametric bootstrap over patients, partitioned-analysis pooling,
and normal-theory confidence intervals.

The bootstrap resamples whole patient histories (a patient's person-days
stay together) and reruns the complete analysis — model refits plus the
Monte Carlo integration — once per resample.  Resamples are encoded as
per-patient multiplicity counts so refits can reuse the person-day table
built for the point estimate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .km import SurvivalCurve
from .rng import STAGE_BOOTSTRAP, STAGE_PARTITION, substream

__all__ = [
    "BootstrapResult",
    "bootstrap",
    "combine_partition_ses",
    "confidence_interval",
    "partition_patients",
]

#: a full re-analysis: multiplicity counts per group (or None for the point
#: estimate) and the resample index -> ({curve label: SurvivalCurve}, rmst diff)
AnalysisFn = Callable[[Mapping[str, np.ndarray] | None, int], tuple[Mapping[str, SurvivalCurve], float]]


@dataclass
class BootstrapResult:
    """Standard errors from ``R`` patient-level resamples.

    ``se_log[label][t]`` is the sample standard deviation across resamples
    of log of curve ``label`` at day t (nan where a resample's survival hit
    zero and the log-scale spread is undefined).  ``rmst_diffs`` keeps each
    completed resample's restricted-mean difference so partitioned runs can
    pool further.
    """

    requested: int
    completed: int
    dropped: int
    se_log: dict[str, np.ndarray]
    rmst_diff_se: float
    rmst_diffs: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    def __post_init__(self):
        if self.requested < 2:
            raise ValueError("a bootstrap needs at least 2 resamples")
        for label, se in self.se_log.items():
            finite = se[np.isfinite(se)]
            if np.any(finite < 0):
                raise ValueError(f"negative standard error for curve {label!r}")
        if np.isfinite(self.rmst_diff_se) and self.rmst_diff_se < 0:
            raise ValueError("negative standard error for the RMST difference")


def bootstrap(
    group_sizes: Mapping[str, int],
    analyze: AnalysisFn,
    R: int,
    seed: int,
    max_dropped_fraction: float = 0.2,
) -> BootstrapResult:
    """Run ``R`` patient-resampled re-analyses and collect standard errors.

    Each resample draws, independently within every group (the two
    initiation eras, say), multinomial multiplicity counts over that
    group's patients — a with-replacement resample of the same size — and
    hands them to ``analyze`` along with the resample index (for any
    internal Monte Carlo seeding).  A resample whose re-analysis raises is
    dropped with a warning; more than ``max_dropped_fraction`` of R dropped
    is an error.

    Resample r's counts come from their own RNG substream of ``seed``, so
    the result is reproducible no matter how resamples are scheduled.
    """
    if R < 2:
        raise ValueError("a bootstrap needs at least 2 resamples")
    for g, n in group_sizes.items():
        if n < 1:
            raise ValueError(f"group {g!r} has no patients to resample")

    log_curves: dict[str, list[np.ndarray]] = {}
    diffs: list[float] = []
    dropped = 0
    for r in range(R):
        rng = substream(seed, STAGE_BOOTSTRAP, r)
        mult = {
            g: rng.multinomial(n, np.full(n, 1.0 / n)).astype(float)
            for g, n in group_sizes.items()
        }
        try:
            curves, diff = analyze(mult, r)
        except Exception as e:  # noqa: BLE001 - any failed refit drops the resample
            dropped += 1
            warnings.warn(f"resample {r} failed and was dropped: {e}", stacklevel=2)
            continue
        with np.errstate(divide="ignore"):
            for label, curve in curves.items():
                log_curves.setdefault(label, []).append(np.log(curve.values))
        diffs.append(float(diff))

    if dropped > max_dropped_fraction * R:
        raise RuntimeError(
            f"{dropped} of {R} bootstrap resamples failed; the fits are too unstable to report standard errors"
        )

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-(-inf) columns
        se_log = {
            label: np.std(np.vstack(rows), axis=0, ddof=1)
            for label, rows in log_curves.items()
        }
    rmst_diffs = np.asarray(diffs)
    return BootstrapResult(
        requested=R,
        completed=R - dropped,
        dropped=dropped,
        se_log=se_log,
        rmst_diff_se=float(np.std(rmst_diffs, ddof=1)),
        rmst_diffs=rmst_diffs,
    )


def combine_partition_ses(ses: Sequence[float]) -> float:
    """Pool per-partition standard errors of the averaged estimate:
    (1/P) * sqrt(sum of SE_p^2)."""
    ses = np.asarray(ses, dtype=float)
    if ses.size == 0:
        raise ValueError("no partition standard errors to combine")
    if np.any(ses < 0):
        raise ValueError("standard errors cannot be negative")
    return float(np.sqrt(np.sum(ses**2)) / ses.size)


def confidence_interval(estimate: float, se: float, multiplier: float = 1.96) -> tuple[float, float]:
    """Normal-theory interval: estimate ± multiplier * se."""
    if se < 0:
        raise ValueError("standard error cannot be negative")
    half = multiplier * se
    return (estimate - half, estimate + half)


def partition_patients(n: int, P: int, seed: int) -> list[np.ndarray]:
    """Randomly split patient indices 0..n-1 into P near-equal partitions.

    Deterministic in ``seed``; partition sizes differ by at most one.
    """
    if P < 1:
        raise ValueError("need at least one partition")
    if P > n:
        raise ValueError(f"cannot split {n} patients into {P} partitions")
    rng = substream(seed, STAGE_PARTITION)
    perm = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(perm, P)]
