"""Self-contained statistical kernel: spline bases, Gaussian kernel
weights, maximum-likelihood model fitting and stochastic prediction."""

from __future__ import annotations

import numpy as np

from .design import Design, Factor, Intercept, Interaction, Numeric, Spline
from .glm import FAMILIES, FitInfo, FittedModel, GlmError, fit_glm
from .kernel import KernelWeighting, kernel_weight
from .splines import NaturalSplineBasis, ns_basis

__all__ = [
    "Design",
    "Factor",
    "Intercept",
    "Interaction",
    "Numeric",
    "Spline",
    "FAMILIES",
    "FitInfo",
    "FittedModel",
    "GlmError",
    "fit_glm",
    "KernelWeighting",
    "kernel_weight",
    "NaturalSplineBasis",
    "ns_basis",
    "asinh",
    "asinh_inv",
]


def asinh(x):
    """Inverse hyperbolic sine — the variance-stabilising transform used for
    cost covariates (log-like for large values, linear near zero, fine at 0)."""
    return np.arcsinh(x)


def asinh_inv(x):
    """Inverse of :func:`asinh` (i.e. sinh)."""
    return np.sinh(x)
