"""rdsurv — counterfactual survival under sustained-treatment regimes via
regression discontinuity and Monte Carlo g-computation."""

__version__ = "0.1.0"
