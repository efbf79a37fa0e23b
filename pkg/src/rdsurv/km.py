"""Unadjusted Kaplan–Meier estimation and survival quantiles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["SurvivalCurve", "km_curve", "survival_quantile"]


@dataclass
class SurvivalCurve:
    """Survival probabilities S(t) for t = 0..horizon, with S(0) = 1.

    ``se_log`` optionally holds pointwise standard errors of log S(t)
    (same indexing; entry 0 is 0).
    """

    values: np.ndarray
    horizon: int
    se_log: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.horizon + 1,):
            raise ValueError(f"need horizon+1 = {self.horizon + 1} values, got {self.values.shape}")
        if self.values[0] != 1.0:
            raise ValueError("S(0) must be 1")
        if np.any(self.values < -1e-12) or np.any(self.values > 1 + 1e-12):
            raise ValueError("survival probabilities must lie in [0, 1]")
        if np.any(np.diff(self.values) > 1e-12):
            raise ValueError("survival must be non-increasing")

    def survival(self, t: int) -> float:
        return float(self.values[t])

    def failure(self, t: int) -> float:
        """Cumulative failure probability by day t."""
        return 1.0 - float(self.values[t])


def km_curve(pairs: Sequence[tuple[int, int]], horizon: int) -> SurvivalCurve:
    """Product-limit estimator from (time, event) pairs.

    ``pairs`` rows are (Y, delta) with 1 <= Y <= horizon and delta 1 for
    failure, 0 for censoring.  A unit censored on day t still counts as at
    risk on day t and leaves the risk set afterwards.
    """
    if len(pairs) == 0:
        raise ValueError("km_curve needs at least one observation")
    y = np.asarray([p[0] for p in pairs], dtype=int)
    d = np.asarray([p[1] for p in pairs], dtype=int)
    if np.any((y < 1) | (y > horizon)):
        raise ValueError(f"times must lie in 1..{horizon}")
    if not np.isin(d, (0, 1)).all():
        raise ValueError("event indicators must be 0/1")

    deaths = np.bincount(y[d == 1], minlength=horizon + 1)[1:]
    leaving = np.bincount(y, minlength=horizon + 1)[1:]
    at_risk = len(y) - np.concatenate(([0], np.cumsum(leaving)[:-1]))

    factors = np.ones(horizon)
    has_risk = at_risk > 0
    factors[has_risk] = 1.0 - deaths[has_risk] / at_risk[has_risk]
    values = np.concatenate(([1.0], np.cumprod(factors)))

    # Greenwood variance of log S(t): sum over event days of d/(n(n-d))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(deaths > 0, deaths / (at_risk * (at_risk - deaths)), 0.0)
    var_log = np.concatenate(([0.0], np.cumsum(terms)))
    se_log = np.sqrt(var_log)
    return SurvivalCurve(values=values, horizon=horizon, se_log=se_log)


def survival_quantile(curve: SurvivalCurve, q: float) -> int:
    """Smallest day t with S(t) <= 1 - q; ``horizon + 1`` if never reached."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must be strictly between 0 and 1")
    hit = np.flatnonzero(curve.values <= 1.0 - q)
    return int(hit[0]) if hit.size else curve.horizon + 1
