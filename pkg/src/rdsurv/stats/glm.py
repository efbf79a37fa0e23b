"""Maximum-likelihood fitting for the model families the pipeline needs.

Families
--------
``binomial-logit``             Bernoulli outcome, logit link (IRLS/Newton)
``ordinal-proportional-odds``  ordered categories, cumulative logits
``multinomial-logit``          unordered categories, first level = reference
``gamma-log``                  positive outcome, log link; ML shape
``gaussian-identity``          continuous outcome, identity link

Shared contract: convergence when the largest absolute coefficient change
drops below 1e-8 or the relative deviance change below 1e-10, at most 100
iterations; Newton steps are halved (up to 30 times) whenever they fail
to improve the penalised log-likelihood.  Apparent separation in the
categorical families (diverging coefficients / no convergence) triggers a
warning and one retry with a tiny ridge penalty (1e-6).  Columns that are
linearly dependent in the weighted design are dropped up front with a
warning and their coefficients reported as zero.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg import solve_triangular
from scipy.special import digamma, expit, polygamma

from .design import Design

__all__ = ["FittedModel", "FitInfo", "GlmError", "fit_glm", "FAMILIES"]

FAMILIES = (
    "binomial-logit",
    "ordinal-proportional-odds",
    "multinomial-logit",
    "gamma-log",
    "gaussian-identity",
)

MAX_ITER = 100
COEF_TOL = 1e-8
DEV_TOL = 1e-10
# Expected-information scoring (gamma) converges linearly, so a deviance
# plateau alone can leave a visible score; the fit also requires the working
# -scale score to vanish before it reports convergence.
SCORE_TOL = 1e-9
MAX_HALVINGS = 30
RIDGE_FALLBACK = 1e-6
# |coefficient| beyond this means the likelihood is running away (separated
# data); legitimate fits on correlated bases can reach O(100), so the bar sits
# well above that — complete separation also trips the perfect-fit check long
# before this one matters.
_SEPARATION_COEF = 1e4
_PCLIP = 1e-12


class GlmError(RuntimeError):
    """Non-convergent fit; carries the iteration trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class FitInfo:
    iterations: int = 0
    deviance: float = np.nan
    converged: bool = False
    ridge: float = 0.0
    dropped: list = field(default_factory=list)
    trace: list = field(default_factory=list)


def _as_xw(design: Design, data, weights):
    X = design.matrix(data)
    n = X.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError("weights must be one value per row")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    return X, w


def _rank_keep(X: np.ndarray, w: np.ndarray, names: list[str], info: FitInfo) -> np.ndarray:
    """Boolean mask of linearly independent columns in the weighted design.

    Incremental Cholesky on the correlation-scaled Gram, in column order,
    so that of any collinear group the earliest column is the one kept.
    A residual pivot below 1e-9 means the column is numerically a linear
    combination of the columns already kept.
    """
    p = X.shape[1]
    if p == 0:
        return np.zeros(0, dtype=bool)
    G = (X * w[:, None]).T @ X
    scale = np.sqrt(np.clip(np.diag(G), 1e-300, None))
    Gs = G / scale[:, None] / scale[None, :]
    keep = np.zeros(p, dtype=bool)
    L = np.zeros((p, p))
    k = 0
    for j in range(p):
        z = solve_triangular(L[:k, :k], Gs[keep, j], lower=True) if k else np.zeros(0)
        d = Gs[j, j] - z @ z
        if d > 1e-9:
            L[k, :k], L[k, k] = z, np.sqrt(d)
            keep[j] = True
            k += 1
    if k < p:
        dropped = [names[i] for i in range(p) if not keep[i]]
        info.dropped = dropped
        warnings.warn(
            f"design is rank-deficient; dropping {len(dropped)} column(s): {dropped}",
            stacklevel=3,
        )
    return keep


def _solve_spd(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        c = cho_factor(H, lower=True)
        return cho_solve(c, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]
    except ValueError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


# ---------------------------------------------------------------------------
# binomial
# ---------------------------------------------------------------------------


def _binomial_deviance(y, p, w):
    p = np.clip(p, _PCLIP, 1 - _PCLIP)
    return -2.0 * float(np.sum(w * (y * np.log(p) + (1 - y) * np.log1p(-p))))


def _fit_binomial(X, y, w, init, ridge, info: FitInfo):
    n, p = X.shape
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binomial response must be 0/1")
    beta = np.zeros(p) if init is None else np.array(init, dtype=float)
    eta = X @ beta
    prob = expit(eta)
    dev = _binomial_deviance(y, prob, w) + ridge * float(beta @ beta)
    for it in range(1, MAX_ITER + 1):
        mu_w = np.clip(prob * (1 - prob), _PCLIP, None) * w
        grad = X.T @ (w * (y - prob)) - ridge * beta
        H = (X * mu_w[:, None]).T @ X
        if ridge:
            H = H + ridge * np.eye(p)
        step = _solve_spd(H, grad)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + scale * step
            eta_c = X @ cand
            prob_c = expit(eta_c)
            dev_c = _binomial_deviance(y, prob_c, w) + ridge * float(cand @ cand)
            if np.isfinite(dev_c) and dev_c <= dev + 1e-12:
                break
            scale *= 0.5
        max_step = float(np.max(np.abs(scale * step))) if p else 0.0
        rel_dev = abs(dev - dev_c) / (abs(dev) + 1.0)
        beta, prob, dev = cand, prob_c, dev_c
        info.trace.append({"iteration": it, "deviance": dev, "max_step": max_step})
        if max_step < COEF_TOL or rel_dev < DEV_TOL:
            if dev < 1e-8 and ridge == 0.0:  # perfect fit = complete separation
                raise _Separation()
            info.iterations, info.deviance, info.converged = it, dev, True
            return beta
        if np.max(np.abs(beta)) > _SEPARATION_COEF and ridge == 0.0:
            raise _Separation()
    info.iterations, info.deviance = MAX_ITER, dev
    raise _Separation() if ridge == 0.0 else GlmError("binomial fit did not converge", info.trace)


class _Separation(Exception):
    pass


# ---------------------------------------------------------------------------
# gaussian
# ---------------------------------------------------------------------------


def _fit_gaussian(X, y, w, info: FitInfo):
    y = np.asarray(y, dtype=float)
    H = (X * w[:, None]).T @ X
    beta = _solve_spd(H, X.T @ (w * y))
    resid = y - X @ beta
    rss = float(np.sum(w * resid**2))
    sigma2 = rss / float(np.sum(w))
    info.iterations, info.deviance, info.converged = 1, rss, True
    return beta, sigma2


# ---------------------------------------------------------------------------
# gamma (log link, ML shape)
# ---------------------------------------------------------------------------


def _gamma_deviance(y, mu, w):
    return 2.0 * float(np.sum(w * ((y - mu) / mu - np.log(y / mu))))


def _fit_gamma(X, y, w, init, info: FitInfo):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("gamma response must be strictly positive")
    # log link makes the expected-information weights constant, so the IRLS
    # normal-equations matrix can be factorised once.
    H = (X * w[:, None]).T @ X
    try:
        c = cho_factor(H, lower=True)
        solve = lambda g: cho_solve(c, g)
    except (np.linalg.LinAlgError, ValueError):
        solve = lambda g: np.linalg.lstsq(H, g, rcond=None)[0]
    beta = solve(X.T @ (w * np.log(y))) if init is None else np.array(init, dtype=float)
    eta = X @ beta
    mu = np.exp(eta)
    dev = _gamma_deviance(y, mu, w)
    for it in range(1, MAX_ITER + 1):
        z = eta + (y - mu) / mu
        cand = solve(X.T @ (w * z))
        step = cand - beta
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = beta + scale * step
            eta_t = X @ trial
            mu_t = np.exp(eta_t)
            dev_t = _gamma_deviance(y, mu_t, w)
            if np.isfinite(dev_t) and dev_t <= dev + 1e-12:
                break
            scale *= 0.5
        max_step = float(np.max(np.abs(scale * step))) if X.shape[1] else 0.0
        rel_dev = abs(dev - dev_t) / (abs(dev) + 1.0)
        beta, eta, mu, dev = trial, eta_t, mu_t, dev_t
        info.trace.append({"iteration": it, "deviance": dev, "max_step": max_step})
        score = X.T @ (w * (y - mu) / mu)
        if (max_step < COEF_TOL or rel_dev < DEV_TOL) and (
            score.size == 0 or float(np.max(np.abs(score))) < SCORE_TOL
        ):
            info.iterations, info.deviance, info.converged = it, dev, True
            break
    else:
        info.iterations, info.deviance = MAX_ITER, dev
        raise GlmError("gamma fit did not converge", info.trace)

    # ML shape: solve log(a) - digamma(a) = dbar by Newton.
    wsum = float(np.sum(w))
    dbar = dev / (2.0 * wsum)
    if dbar < 1e-12:
        return beta, 1e12
    a = (3.0 - dbar + np.sqrt((dbar - 3.0) ** 2 + 24.0 * dbar)) / (12.0 * dbar)
    for _ in range(100):
        f = np.log(a) - digamma(a) - dbar
        fp = 1.0 / a - polygamma(1, a)
        step = f / fp
        a_new = a - step
        while a_new <= 0:
            step *= 0.5
            a_new = a - step
        if abs(a_new - a) < 1e-12 * (1 + abs(a)):
            a = a_new
            break
        a = a_new
    return beta, float(a)


# ---------------------------------------------------------------------------
# ordinal (cumulative logits, proportional odds)
# ---------------------------------------------------------------------------


def _ordinal_ll_parts(alpha, beta, X, y_idx, w, K):
    """Log-likelihood plus per-row pieces reused by the derivatives."""
    eta = X @ beta if X.shape[1] else np.zeros(X.shape[0])
    # cumulative probabilities at the two cutpoints bracketing each response
    upper = np.where(y_idx < K - 1, expit(alpha[np.minimum(y_idx, K - 2)] - eta), 1.0)
    lower = np.where(y_idx > 0, expit(alpha[np.maximum(y_idx - 1, 0)] - eta), 0.0)
    p_obs = upper - lower
    if np.any(p_obs <= 0):
        return -np.inf, None
    ll = float(np.sum(w * np.log(p_obs)))
    return ll, (eta, upper, lower, p_obs)


def _fit_ordinal(X, y, w, levels, init, ridge, info: FitInfo):
    n, p = X.shape
    levels_arr = np.asarray(levels)
    y_idx = np.searchsorted(levels_arr, y)
    K = len(levels)
    # weighted cumulative frequencies give feasible starting cutpoints
    counts = np.bincount(y_idx, weights=w, minlength=K)
    cum = np.cumsum(counts)[:-1] / counts.sum()
    cum = np.clip(cum, 1e-6, 1 - 1e-6)
    alpha = np.log(cum / (1 - cum))
    beta = np.zeros(p)
    if init is not None:
        alpha = np.array(init[0], dtype=float)
        beta = np.array(init[1], dtype=float)
    ll, parts = _ordinal_ll_parts(alpha, beta, X, y_idx, w, K)
    ll -= 0.5 * ridge * float(beta @ beta)
    if not np.isfinite(ll):
        raise GlmError("ordinal starting values give zero likelihood", info.trace)
    nparam = (K - 1) + p
    for it in range(1, MAX_ITER + 1):
        eta, upper, lower, p_obs = parts
        f_u = np.where(y_idx < K - 1, upper * (1 - upper), 0.0)
        f_l = np.where(y_idx > 0, lower * (1 - lower), 0.0)
        fp_u = f_u * (1 - 2 * upper)
        fp_l = f_l * (1 - 2 * lower)
        inv_p = 1.0 / p_obs
        # second derivatives of log p wrt the two cut arguments t_u, t_l
        d_uu = w * (fp_u * inv_p - (f_u * inv_p) ** 2)
        d_ll = w * (-fp_l * inv_p - (f_l * inv_p) ** 2)
        d_ul = w * (f_u * f_l * inv_p**2)

        grad = np.zeros(nparam)
        gu = w * f_u * inv_p
        gl = -w * f_l * inv_p
        u_cut = np.minimum(y_idx, K - 2)
        l_cut = np.maximum(y_idx - 1, 0)
        np.add.at(grad, u_cut, gu)
        np.add.at(grad, l_cut, gl)
        if p:
            grad[K - 1 :] = -X.T @ (gu + gl) - ridge * beta

        H = np.zeros((nparam, nparam))
        np.add.at(H, (u_cut, u_cut), d_uu)
        np.add.at(H, (l_cut, l_cut), d_ll)
        np.add.at(H, (u_cut, l_cut), d_ul)
        np.add.at(H, (l_cut, u_cut), d_ul)
        if p:
            cu = -(d_uu + d_ul)  # d2 l / d alpha_u d eta * deta/dbeta sign folded
            cl = -(d_ll + d_ul)
            Hab = np.zeros((K - 1, p))
            np.add.at(Hab, u_cut, cu[:, None] * X)
            np.add.at(Hab, l_cut, cl[:, None] * X)
            H[: K - 1, K - 1 :] = Hab
            H[K - 1 :, : K - 1] = Hab.T
            cbb = d_uu + 2 * d_ul + d_ll
            H[K - 1 :, K - 1 :] = (X * cbb[:, None]).T @ X - ridge * np.eye(p)

        step = _solve_spd(-H, grad)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            a_c = alpha + scale * step[: K - 1]
            b_c = beta + scale * step[K - 1 :]
            ll_c, parts_c = _ordinal_ll_parts(a_c, b_c, X, y_idx, w, K)
            ll_c -= 0.5 * ridge * float(b_c @ b_c)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12:
                break
            scale *= 0.5
        max_step = float(np.max(np.abs(scale * step)))
        rel_dev = abs(ll - ll_c) / (abs(ll) + 1.0)
        alpha, beta, ll, parts = a_c, b_c, ll_c, parts_c
        info.trace.append({"iteration": it, "deviance": -2 * ll, "max_step": max_step})
        if max_step < COEF_TOL or rel_dev < DEV_TOL / 2:
            if -2 * ll < 1e-8 and ridge == 0.0:
                raise _Separation()
            info.iterations, info.deviance, info.converged = it, -2 * ll, True
            return alpha, beta
        if p and np.max(np.abs(beta)) > _SEPARATION_COEF and ridge == 0.0:
            raise _Separation()
    info.iterations, info.deviance = MAX_ITER, -2 * ll
    raise _Separation() if ridge == 0.0 else GlmError("ordinal fit did not converge", info.trace)


# ---------------------------------------------------------------------------
# multinomial (baseline-category logits)
# ---------------------------------------------------------------------------


def _multinomial_ll(B, X, Y, w):
    eta = X @ B.T  # (n, K-1)
    m = np.maximum(0.0, eta.max(axis=1))
    lse = m + np.log(np.exp(-m) + np.sum(np.exp(eta - m[:, None]), axis=1))
    ll = float(np.sum(w * ((Y[:, 1:] * eta).sum(axis=1) - lse)))
    probs_non_ref = np.exp(eta - lse[:, None])
    return ll, probs_non_ref


def _fit_multinomial(X, y, w, levels, init, ridge, info: FitInfo):
    n, p = X.shape
    K = len(levels)
    lv = list(levels)
    idx = np.array([lv.index(v) for v in y.tolist()])
    Y = np.zeros((n, K))
    Y[np.arange(n), idx] = 1.0
    B = np.zeros((K - 1, p)) if init is None else np.array(init, dtype=float)
    ll, P = _multinomial_ll(B, X, Y, w)
    ll -= 0.5 * ridge * float(np.sum(B * B))
    nparam = (K - 1) * p
    for it in range(1, MAX_ITER + 1):
        G = np.empty((K - 1, p))
        for k in range(K - 1):
            G[k] = X.T @ (w * (Y[:, k + 1] - P[:, k]))
        grad = G.ravel() - ridge * B.ravel()
        H = np.empty((nparam, nparam))
        for k in range(K - 1):
            for l in range(k, K - 1):
                wt = w * P[:, k] * ((1.0 if k == l else 0.0) - P[:, l])
                blk = (X * wt[:, None]).T @ X
                H[k * p : (k + 1) * p, l * p : (l + 1) * p] = blk
                H[l * p : (l + 1) * p, k * p : (k + 1) * p] = blk.T
        H += ridge * np.eye(nparam)
        step = _solve_spd(H, grad).reshape(K - 1, p)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = B + scale * step
            ll_c, P_c = _multinomial_ll(cand, X, Y, w)
            ll_c -= 0.5 * ridge * float(np.sum(cand * cand))
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12:
                break
            scale *= 0.5
        max_step = float(np.max(np.abs(scale * step)))
        rel_dev = abs(ll - ll_c) / (abs(ll) + 1.0)
        B, ll, P = cand, ll_c, P_c
        info.trace.append({"iteration": it, "deviance": -2 * ll, "max_step": max_step})
        if max_step < COEF_TOL or rel_dev < DEV_TOL / 2:
            if -2 * ll < 1e-8 and ridge == 0.0:
                raise _Separation()
            info.iterations, info.deviance, info.converged = it, -2 * ll, True
            return B
        if np.max(np.abs(B)) > _SEPARATION_COEF and ridge == 0.0:
            raise _Separation()
    info.iterations, info.deviance = MAX_ITER, -2 * ll
    raise _Separation() if ridge == 0.0 else GlmError("multinomial fit did not converge", info.trace)


# ---------------------------------------------------------------------------
# public façade
# ---------------------------------------------------------------------------


@dataclass
class FittedModel:
    """A fitted GLM: bound design + coefficients + fit metadata.

    ``coef`` covers the kept design columns only (see ``kept``); dropped
    columns act as zero.  ``dispersion`` holds the gamma shape or the
    gaussian error variance.  Categorical families carry their response
    levels; ordinal levels are ascending integers, multinomial levels are
    in first-observed order with the first as reference.
    """

    family: str
    design: Design
    response: str
    kept: np.ndarray
    coef: np.ndarray | None = None
    cutpoints: np.ndarray | None = None
    coef_matrix: np.ndarray | None = None
    dispersion: float | None = None
    response_levels: list | None = None
    info: FitInfo = field(default_factory=FitInfo)

    # -- linear algebra ----------------------------------------------------

    def _X(self, data) -> np.ndarray:
        return self.design.matrix(data)[:, self.kept]

    def linear_predictor(self, data) -> np.ndarray:
        X = self._X(data)
        if self.family == "multinomial-logit":
            return X @ self.coef_matrix.T
        return X @ self.coef

    # -- predictions ---------------------------------------------------------

    def predict_prob(self, data) -> np.ndarray:
        """Event probability (binomial only)."""
        if self.family != "binomial-logit":
            raise ValueError(f"predict_prob is for binomial models, not {self.family}")
        return expit(self.linear_predictor(data))

    def predict_mean(self, data) -> np.ndarray:
        if self.family == "binomial-logit":
            return expit(self.linear_predictor(data))
        if self.family == "gamma-log":
            return np.exp(self.linear_predictor(data))
        if self.family == "gaussian-identity":
            return self.linear_predictor(data)
        raise ValueError(f"predict_mean undefined for {self.family}")

    def class_probs(self, data) -> np.ndarray:
        """(n, K) class-probability matrix (ordinal / multinomial)."""
        return self.class_probs_from_eta(self.linear_predictor(data))

    # -- eta-level variants (for engines that cache linear predictors) -------

    def full_coef(self) -> np.ndarray:
        """Coefficients over *all* design columns, zeros where dropped.
        Multinomial gives the (K-1, p_full) matrix; others a vector."""
        p_full = self.kept.shape[0]
        if self.family == "multinomial-logit":
            out = np.zeros((self.coef_matrix.shape[0], p_full))
            out[:, self.kept] = self.coef_matrix
            return out
        out = np.zeros(p_full)
        out[self.kept] = self.coef
        return out

    def class_probs_from_eta(self, eta: np.ndarray) -> np.ndarray:
        if self.family == "ordinal-proportional-odds":
            K = len(self.response_levels)
            cum = expit(self.cutpoints[None, :] - eta[:, None])
            out = np.empty((eta.shape[0], K))
            out[:, 0] = cum[:, 0]
            out[:, 1:-1] = np.diff(cum, axis=1)
            out[:, -1] = 1.0 - cum[:, -1]
            return out
        if self.family == "multinomial-logit":
            full = np.hstack([np.zeros((eta.shape[0], 1)), eta])
            full -= full.max(axis=1, keepdims=True)
            e = np.exp(full)
            return e / e.sum(axis=1, keepdims=True)
        raise ValueError(f"class_probs undefined for {self.family}")

    def mean_from_eta(self, eta: np.ndarray) -> np.ndarray:
        if self.family == "binomial-logit":
            return expit(eta)
        if self.family == "gamma-log":
            return np.exp(eta)
        if self.family == "gaussian-identity":
            return eta
        raise ValueError(f"mean undefined for {self.family}")

    def sample_from_eta(self, rng: np.random.Generator, eta: np.ndarray) -> np.ndarray:
        """Like :meth:`sample` but from precomputed linear predictors."""
        if self.family == "binomial-logit":
            return (rng.random(eta.shape[0]) < expit(eta)).astype(np.int8)
        if self.family in ("ordinal-proportional-odds", "multinomial-logit"):
            probs = self.class_probs_from_eta(eta)
            cum = np.cumsum(probs, axis=1)
            u = rng.random(probs.shape[0])
            idx = np.minimum((u[:, None] >= cum).sum(axis=1), len(self.response_levels) - 1)
            return np.asarray(self.response_levels)[idx]
        if self.family == "gamma-log":
            return rng.gamma(self.dispersion, np.exp(eta) / self.dispersion)
        if self.family == "gaussian-identity":
            return rng.normal(eta, np.sqrt(self.dispersion))
        raise ValueError(self.family)

    def predict(self, data):
        """Distribution parameters for each row: probabilities for the
        categorical families, the mean for the others (dispersion/shape is
        on the model)."""
        if self.family in ("ordinal-proportional-odds", "multinomial-logit"):
            return self.class_probs(data)
        return self.predict_mean(data)

    def sample(self, rng: np.random.Generator, data) -> np.ndarray:
        """One stochastic outcome per row.

        Categorical families consume exactly one uniform per row
        (inverse-CDF), which the Monte Carlo engine's matched-seed
        coupling relies on.
        """
        if self.family == "multinomial-logit":
            return self.sample_from_eta(rng, self.linear_predictor(data))
        X = self._X(data)
        eta = X @ self.coef if self.coef is not None else np.zeros(X.shape[0])
        return self.sample_from_eta(rng, eta)

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "family": self.family,
            "response": self.response,
            "design": self.design.to_dict(),
            "kept": self.kept.astype(bool).tolist(),
            "coef": arr(self.coef),
            "cutpoints": arr(self.cutpoints),
            "coef_matrix": arr(self.coef_matrix),
            "dispersion": self.dispersion,
            "response_levels": self.response_levels,
            "info": {
                "iterations": self.info.iterations,
                "deviance": self.info.deviance,
                "converged": self.info.converged,
                "ridge": self.info.ridge,
                "dropped": list(self.info.dropped),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        info = FitInfo(
            iterations=d["info"]["iterations"],
            deviance=d["info"]["deviance"],
            converged=d["info"]["converged"],
            ridge=d["info"].get("ridge", 0.0),
            dropped=list(d["info"].get("dropped", [])),
        )
        return cls(
            family=d["family"],
            design=Design.from_dict(d["design"]),
            response=d["response"],
            kept=np.asarray(d["kept"], dtype=bool),
            coef=arr(d["coef"]),
            cutpoints=arr(d["cutpoints"]),
            coef_matrix=arr(d["coef_matrix"]),
            dispersion=d["dispersion"],
            response_levels=d["response_levels"],
            info=info,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "FittedModel":
        return cls.from_dict(json.loads(s))


def fit_glm(
    family: str,
    design: Design,
    data,
    response: str,
    weights=None,
    reuse: FittedModel | None = None,
) -> FittedModel:
    """Fit one GLM by maximum likelihood.

    ``reuse`` hands back a previously fitted model on the same design so
    repeated fits (bootstrap resamples) skip the rank check and warm-start
    Newton at the old coefficients.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    if not design._bound:
        design.bind(data)
    info = FitInfo()
    X_full, w = _as_xw(design, data, weights)
    y = np.asarray(data[response])
    names = design.column_names

    if family == "ordinal-proportional-odds":
        # cutpoints play the intercept's role; drop an explicit intercept column
        keep_names = [i for i, nm in enumerate(names) if nm != "(Intercept)"]
        if len(keep_names) != len(names):
            mask = np.zeros(len(names), dtype=bool)
            mask[keep_names] = True
            X_full = X_full[:, mask]
            base_kept = mask
            names = [names[i] for i in keep_names]
        else:
            base_kept = np.ones(len(names), dtype=bool)
    else:
        base_kept = np.ones(len(names), dtype=bool)

    if reuse is not None:
        kept_sub = reuse.kept[base_kept] if family == "ordinal-proportional-odds" else reuse.kept
        info.dropped = list(reuse.info.dropped)
    else:
        kept_sub = _rank_keep(X_full, w, names, info)
    X = X_full[:, kept_sub]
    kept = base_kept.copy()
    kept[base_kept] = kept_sub

    model = FittedModel(family=family, design=design, response=response, kept=kept, info=info)

    if family == "gaussian-identity":
        model.coef, model.dispersion = _fit_gaussian(X, y, w, info)
        return model

    if family == "gamma-log":
        init = reuse.coef if reuse is not None else None
        model.coef, model.dispersion = _fit_gamma(X, y, w, init, info)
        return model

    def with_ridge_fallback(run):
        try:
            return run(0.0)
        except _Separation:
            warnings.warn(
                f"{family} fit shows separation/divergence; retrying with ridge {RIDGE_FALLBACK}",
                stacklevel=3,
            )
            info.ridge = RIDGE_FALLBACK
            info.trace.clear()
            return run(RIDGE_FALLBACK)

    if family == "binomial-logit":
        init = reuse.coef if reuse is not None else None
        model.coef = with_ridge_fallback(lambda lam: _fit_binomial(X, y, w, init, lam, info))
        return model

    if family == "ordinal-proportional-odds":
        if not np.issubdtype(np.asarray(y).dtype, np.integer):
            raise ValueError("ordinal response must be integer-coded")
        levels = reuse.response_levels if reuse is not None else np.unique(y).tolist()
        if len(levels) < 2:
            raise ValueError("ordinal response needs at least 2 observed levels")
        init = (reuse.cutpoints, reuse.coef) if reuse is not None else None
        alpha, beta = with_ridge_fallback(lambda lam: _fit_ordinal(X, y, w, levels, init, lam, info))
        model.cutpoints, model.coef, model.response_levels = alpha, beta, [int(v) for v in levels]
        return model

    # multinomial
    levels = reuse.response_levels if reuse is not None else list(dict.fromkeys(y.tolist()))
    if len(levels) < 2:
        raise ValueError("multinomial response needs at least 2 observed levels")
    init = reuse.coef_matrix if reuse is not None else None
    model.coef_matrix = with_ridge_fallback(lambda lam: _fit_multinomial(X, y, w, levels, init, lam, info))
    model.response_levels = levels
    return model
