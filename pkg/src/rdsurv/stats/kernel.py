"""Gaussian kernel weights for distance-to-cutoff weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["kernel_weight", "KernelWeighting"]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def kernel_weight(u, u_star: float, h: float) -> np.ndarray:
    """Standard-normal density of the bandwidth-scaled distance to the cutoff.

    ``phi((u - u_star) / h)`` — unnormalised: callers that need sampling
    probabilities normalise over their own support.  With h = 365, about
    95% of the weight mass sits within two years of the cutoff.
    """
    if h <= 0:
        raise ValueError("bandwidth h must be positive")
    z = (np.asarray(u, dtype=float) - u_star) / h
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass(frozen=True)
class KernelWeighting:
    """A cutoff + bandwidth pair, the unit handed around the pipeline."""

    u_star: int
    h: float

    def weights(self, u) -> np.ndarray:
        return kernel_weight(u, self.u_star, self.h)
