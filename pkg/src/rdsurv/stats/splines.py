"""Natural cubic spline bases.

Truncated-power construction of the natural (restricted) cubic spline
basis: cubic between knots, linear beyond the boundary knots.  With
knots k_1 < ... < k_K the basis columns (intercept excluded) are

    N_1(x) = x,
    N_{j+1}(x) = d_j(x) - d_{K-1}(x),   j = 1..K-2,

    d_j(x) = [ (x - k_j)_+^3 - (x - k_K)_+^3 ] / (k_K - k_j),

which gives ``df = K - 1`` columns.  Inputs are affinely rescaled so the
boundary knots sit at +/-1 before the cubes are taken; without this the
basis is numerically useless for day-offset covariates in the 10^4 range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["NaturalSplineBasis", "ns_basis"]


def _default_knots(x: np.ndarray, df: int) -> np.ndarray:
    """Boundary knots at the data extremes, interior at equally spaced quantiles."""
    lo, hi = float(np.min(x)), float(np.max(x))
    if lo == hi:
        raise ValueError("spline covariate is constant; need at least 2 distinct values")
    n_interior = df - 1
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    interior = np.quantile(x, probs) if n_interior > 0 else np.empty(0)
    knots = np.unique(np.concatenate([[lo], np.atleast_1d(interior), [hi]]).astype(float))
    return knots


@dataclass(frozen=True)
class NaturalSplineBasis:
    """A fitted natural cubic spline basis: knots plus the internal rescaling.

    ``df`` equals ``len(knots) - 1``.  Duplicate quantile knots (heavily
    tied covariates) are collapsed, which lowers ``df`` accordingly.
    """

    knots: tuple[float, ...]
    _center: float = field(init=False, repr=False, default=0.0)
    _scale: float = field(init=False, repr=False, default=1.0)

    def __post_init__(self):
        ks = np.asarray(self.knots, dtype=float)
        if ks.ndim != 1 or ks.size < 2:
            raise ValueError("need at least 2 knots")
        if np.any(np.diff(ks) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "_center", float((ks[0] + ks[-1]) / 2.0))
        object.__setattr__(self, "_scale", float((ks[-1] - ks[0]) / 2.0))

    @property
    def df(self) -> int:
        return len(self.knots) - 1

    @classmethod
    def from_data(cls, x: np.ndarray, df: int, knots=None) -> "NaturalSplineBasis":
        if knots is not None:
            return cls(tuple(float(k) for k in knots))
        if df < 1:
            raise ValueError("df must be >= 1")
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            raise ValueError("no data to place knots on")
        return cls(tuple(_default_knots(x, df)))

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the basis; shape (len(x), df). Values beyond the boundary
        knots extrapolate linearly by construction."""
        x = np.asarray(x, dtype=float)
        s = (x - self._center) / self._scale
        ks = (np.asarray(self.knots) - self._center) / self._scale
        K = len(ks)
        cols = np.empty((x.shape[0], self.df), dtype=float)
        cols[:, 0] = s
        if K > 2:
            cube_last = np.clip(s - ks[-1], 0.0, None) ** 3
            denom_last = ks[-1] - ks[-2]
            d_last = (np.clip(s - ks[-2], 0.0, None) ** 3 - cube_last) / denom_last
            for j in range(K - 2):
                d_j = (np.clip(s - ks[j], 0.0, None) ** 3 - cube_last) / (ks[-1] - ks[j])
                cols[:, j + 1] = d_j - d_last
        return cols

    def to_dict(self) -> dict:
        return {"knots": list(self.knots)}

    @classmethod
    def from_dict(cls, d: dict) -> "NaturalSplineBasis":
        return cls(tuple(float(k) for k in d["knots"]))


def ns_basis(x: np.ndarray, df: int, knots=None) -> tuple[np.ndarray, NaturalSplineBasis]:
    """Natural cubic spline design columns for ``x``.

    Knots default to equally spaced quantiles with boundary knots at the
    observed extremes.  Returns the matrix together with the fitted basis
    (reusable on new data, serialisable).
    """
    basis = NaturalSplineBasis.from_data(x, df, knots=knots)
    return basis.transform(np.asarray(x, dtype=float)), basis
