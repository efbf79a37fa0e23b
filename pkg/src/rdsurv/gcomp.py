"""Sequential conditional models on claims person-days and Monte Carlo
integration of counterfactual survival under a sustained regime.

The fitting side turns patient histories into a person-day table (one row
per at-risk, uncensored day) and fits four models in the day's causal
order: prescription burden, any out-of-pocket spending, the positive
spending amount, and the failure hazard.  The simulation side draws
baseline rows from a kernel-weighted sampler, forces treatment to the
regime path, and rolls each path forward one day at a time.

Every simulated path draws from every model every day, even after its
failure day.  That fixed consumption pattern couples paths across runs
with the same seed: inflating the hazard can only move each path's
failure earlier, and block-wise RNG substreams make the result identical
no matter how blocks are scheduled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .domain import PatientHistory, Regime, regime_cost_path
from .km import SurvivalCurve
from .rdd import BaselineSampler
from .rng import PATH_BLOCK, STAGE_PATHS, blocks, substream
from .stats import Design, Factor, FittedModel, GlmError, Intercept, Numeric, Spline, fit_glm

__all__ = [
    "RXB_CAP",
    "OUT_CAP",
    "build_person_day_table",
    "SequentialModelSpec",
    "FittedModelSet",
    "fit_sequential",
    "prediction_error_rates",
    "gamma_pit_kolmogorov",
    "gcomp_survival",
    "rmst",
    "rmst_difference",
]

RXB_CAP = 4  # prescription counts 0,1,2,3 and ">3"
OUT_CAP = 2  # outpatient visits 0, 1, ">1"

#: columns a fitted model set's designs may reference, fixed per path
STATIC_COLS = frozenset({"age", "sex", "race", "ses_cat", "cci_pos", "out_cat", "u"})


def build_person_day_table(
    histories: Sequence[PatientHistory],
    arm: int,
    horizon: int,
) -> pd.DataFrame:
    """One row per person-day t = 1..Y.

    Dynamic columns carry the day's covariates and their one-day lags
    (lags on day 1 repeat the day-1 value; model row filters exclude day 1
    anyway).  ``z_off`` collapses every exposure category other than the
    era's initiating form into a single indicator; ``fail`` is the day's
    failure outcome; ``adherent`` marks days before the first departure
    from the initiating form.
    """
    cols: dict[str, list[np.ndarray]] = {k: [] for k in (
        "pid_idx", "t", "u", "age", "sex", "race", "ses_cat", "cci_pos", "out_cat",
        "rxb_cat", "rxb_prev_cat", "oop_asinh", "oop_asinh_prev", "oop_pos",
        "oop_pos_prev", "z_off", "z2", "fail", "adherent",
    )}
    for i, h in enumerate(histories):
        y = h.y
        t = np.arange(1, y + 1)
        rxb_cat = np.minimum(h.rxb, RXB_CAP).astype(np.int64)
        oop_asinh = np.arcsinh(h.oop)
        oop_pos = (h.oop > 0).astype(np.int64)
        fail = np.zeros(y, dtype=np.int64)
        fail[y - 1] = h.delta
        off = np.flatnonzero(h.z1 != arm)
        prefix = int(off[0]) if off.size else y

        def lag(a):
            return np.concatenate(([a[0]], a[:-1]))

        b = h.baseline
        cols["pid_idx"].append(np.full(y, i, dtype=np.int64))
        cols["t"].append(t)
        cols["u"].append(np.full(y, float(h.u)))
        cols["age"].append(np.full(y, b.age))
        cols["sex"].append(np.full(y, b.sex, dtype=object))
        cols["race"].append(np.full(y, b.race, dtype=object))
        cols["ses_cat"].append(np.full(y, b.ses, dtype=np.int64))
        cols["cci_pos"].append(np.full(y, int(b.cci > 0), dtype=np.int64))
        cols["out_cat"].append(np.full(y, min(b.out, OUT_CAP), dtype=np.int64))
        cols["rxb_cat"].append(rxb_cat)
        cols["rxb_prev_cat"].append(lag(rxb_cat))
        cols["oop_asinh"].append(oop_asinh)
        cols["oop_asinh_prev"].append(lag(oop_asinh))
        cols["oop_pos"].append(oop_pos)
        cols["oop_pos_prev"].append(lag(oop_pos))
        cols["z_off"].append((h.z1 != arm).astype(np.int64))
        cols["z2"].append(np.asarray(h.z2, dtype=float))
        cols["fail"].append(fail)
        cols["adherent"].append((t <= prefix).astype(np.int64))
    return pd.DataFrame({k: np.concatenate(v) for k, v in cols.items()})


def _maybe_spline(col: str, df: int, data) -> Numeric | Spline:
    """A spline, unless the column is constant in the training rows (a
    zero-spending cohort, say) — then a plain numeric column that the rank
    check can drop."""
    if data is not None:
        v = np.asarray(data[col], dtype=float)
        if v.size and float(np.min(v)) == float(np.max(v)):
            return Numeric(col)
    return Spline(col, df)


@dataclass(frozen=True)
class SequentialModelSpec:
    """Declares the era's four models: which form counts as "on regime",
    the spline complexities, and how the positive spending amount is
    parametrized (the value itself or its reciprocal).

    The design builders take the model's training rows so that splines on
    possibly-degenerate columns (spending, cumulative cost) can fall back
    to plain numeric columns when there is nothing to spline."""

    era: str
    arm: int
    u_star: int
    h: float
    df_age: int = 3
    df_oop: int = 3
    df_z2: int = 3
    df_u: int = 5
    df_t: int = 3
    oop_reciprocal: bool = False

    def _shared_terms(self, data) -> list:
        return [
            Intercept(),
            Spline("age", self.df_age),
            Factor("sex"),
            Factor("race"),
            Factor("ses_cat"),
            Factor("cci_pos"),
            Factor("out_cat"),
            Spline("u", self.df_u),
            Spline("t", self.df_t),
            Numeric("z_off"),
            _maybe_spline("z2", self.df_z2, data),
        ]

    def rxb_design(self, data=None) -> Design:
        return Design(
            self._shared_terms(data)
            + [Factor("rxb_prev_cat"), _maybe_spline("oop_asinh_prev", self.df_oop, data)]
        )

    def oop_pos_design(self, data=None) -> Design:
        return Design(
            self._shared_terms(data)
            + [Factor("rxb_cat"), _maybe_spline("oop_asinh_prev", self.df_oop, data), Numeric("oop_pos_prev")]
        )

    def oop_design(self, data=None) -> Design:
        return Design(
            self._shared_terms(data)
            + [Factor("rxb_cat"), _maybe_spline("oop_asinh_prev", self.df_oop, data)]
        )

    def hazard_design(self, data=None) -> Design:
        return Design(
            self._shared_terms(data)
            + [Factor("rxb_cat"), _maybe_spline("oop_asinh", self.df_oop, data), Numeric("oop_pos")]
        )


@dataclass
class FittedModelSet:
    """The era's fitted sequential models plus enough metadata to rerun
    them.  A model slot is None when its response was constant in the
    training rows; the matching ``*_constant`` then carries the value the
    simulation should use."""

    era: str
    arm: int
    u_star: int
    h: float
    horizon: int
    hazard_model: FittedModel
    rxb_model: FittedModel | None = None
    rxb_constant: int | None = None
    oop_pos_model: FittedModel | None = None
    oop_pos_constant: int | None = None
    oop_model: FittedModel | None = None
    oop_reciprocal: bool = False
    notes: list[str] = field(default_factory=list)
    gof: dict | None = None

    def to_dict(self) -> dict:
        def m(x):
            return None if x is None else x.to_dict()

        return {
            "era": self.era,
            "arm": self.arm,
            "u_star": self.u_star,
            "h": self.h,
            "horizon": self.horizon,
            "hazard_model": self.hazard_model.to_dict(),
            "rxb_model": m(self.rxb_model),
            "rxb_constant": self.rxb_constant,
            "oop_pos_model": m(self.oop_pos_model),
            "oop_pos_constant": self.oop_pos_constant,
            "oop_model": m(self.oop_model),
            "oop_reciprocal": self.oop_reciprocal,
            "notes": list(self.notes),
            "gof": self.gof,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModelSet":
        def m(x):
            return None if x is None else FittedModel.from_dict(x)

        return cls(
            era=d["era"],
            arm=d["arm"],
            u_star=d["u_star"],
            h=d["h"],
            horizon=d["horizon"],
            hazard_model=FittedModel.from_dict(d["hazard_model"]),
            rxb_model=m(d["rxb_model"]),
            rxb_constant=d["rxb_constant"],
            oop_pos_model=m(d["oop_pos_model"]),
            oop_pos_constant=d["oop_pos_constant"],
            oop_model=m(d["oop_model"]),
            oop_reciprocal=d["oop_reciprocal"],
            notes=list(d.get("notes", [])),
            gof=d.get("gof"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "FittedModelSet":
        return cls.from_dict(json.loads(s))


def _fit_named(name, family, design, data, response, weights, reuse):
    try:
        return fit_glm(family, design, data, response, weights=weights, reuse=reuse)
    except GlmError as e:
        raise RuntimeError(f"the {name} model did not converge: {e}") from e


def fit_sequential(
    histories: Sequence[PatientHistory] | None,
    spec: SequentialModelSpec,
    horizon: int,
    table: pd.DataFrame | None = None,
    patient_weights: np.ndarray | None = None,
    kernel_fit: bool = False,
    adherent_only: bool = False,
    reuse: FittedModelSet | None = None,
    bind_table: pd.DataFrame | None = None,
) -> FittedModelSet:
    """Fit the era's sequential models on person-day rows.

    By default every at-risk, uncensored person-day contributes, with the
    day's actual exposure entering as covariates (``z_off``, ``z2``) that
    the simulation later pins to the regime; ``adherent_only`` instead
    drops rows after the first departure from the initiating form, which
    leaves the exposure covariates constant (they are then rank-dropped).

    ``table`` short-circuits table construction (resamples reuse the
    table built once for the point estimate, with ``patient_weights``
    carrying each patient's resample multiplicity); ``kernel_fit``
    additionally weights rows by the gaussian kernel in the initiation
    date.  ``reuse`` warm-starts each model at a previous fit's
    coefficients with its frozen design.

    ``bind_table`` widens design binding beyond the training rows: factor
    levels and spline knots come from these rows instead, so models fit on
    a subset can still score rows whose levels the subset happens to miss
    (held-out evaluation on a split sample, say).
    """
    if table is None:
        if histories is None:
            raise ValueError("need histories or a prebuilt person-day table")
        table = build_person_day_table(histories, spec.arm, horizon)
    w = np.ones(len(table))
    if patient_weights is not None:
        w = np.asarray(patient_weights, dtype=float)[table["pid_idx"].to_numpy()]
    if kernel_fit:
        from .stats import kernel_weight

        w = w * kernel_weight(table["u"].to_numpy(), spec.u_star, spec.h)
    if adherent_only:
        w = w * (table["adherent"].to_numpy() == 1)

    live = w > 0
    t2 = live & (table["t"].to_numpy() >= 2)
    notes: list[str] = []

    def sub(mask):
        return table.loc[mask], w[mask]

    def design(maker, fit_data, bind_mask):
        if bind_table is None:
            return maker(fit_data)
        rows = bind_table.loc[bind_mask]
        return maker(rows).bind(rows)

    bind_t2 = None if bind_table is None else bind_table["t"].to_numpy() >= 2

    # (1) prescription burden, ordinal over the day-before state
    rxb_model = rxb_constant = None
    data1, w1 = sub(t2)
    if not len(data1):
        raise ValueError("no person-days beyond day 1; the covariate models have nothing to fit")
    levels1 = np.unique(data1["rxb_cat"].to_numpy())
    if len(levels1) >= 2:
        rxb_model = _fit_named(
            "prescription-burden", "ordinal-proportional-odds",
            design(spec.rxb_design, data1, bind_t2) if reuse is None else reuse.rxb_model.design,
            data1, "rxb_cat", w1, reuse.rxb_model if reuse else None,
        )
    else:
        rxb_constant = int(levels1[0])
        notes.append(f"prescription burden is constant ({rxb_constant}) in the training rows")

    # (2) any spending today
    oop_pos_model = oop_pos_constant = None
    levels2 = np.unique(data1["oop_pos"].to_numpy())
    if len(levels2) >= 2:
        oop_pos_model = _fit_named(
            "spending-indicator", "binomial-logit",
            design(spec.oop_pos_design, data1, bind_t2) if reuse is None else reuse.oop_pos_model.design,
            data1, "oop_pos", w1, reuse.oop_pos_model if reuse else None,
        )
    else:
        oop_pos_constant = int(levels2[0])
        notes.append(f"spending indicator is constant ({oop_pos_constant}) in the training rows")

    # (3) positive spending amount, gamma on the asinh scale
    oop_model = None
    m3 = t2 & (table["oop_pos"].to_numpy() == 1)
    if m3.any() and not (oop_pos_constant == 0):
        data3, w3 = sub(m3)
        resp = data3["oop_asinh"].to_numpy()
        data3 = data3.assign(oop_resp=(1.0 / resp) if spec.oop_reciprocal else resp)
        bind_m3 = None if bind_table is None else bind_t2 & (bind_table["oop_pos"].to_numpy() == 1)
        oop_model = _fit_named(
            "spending-amount", "gamma-log",
            design(spec.oop_design, data3, bind_m3) if reuse is None else reuse.oop_model.design,
            data3, "oop_resp", w3, reuse.oop_model if reuse else None,
        )
    elif oop_pos_constant != 0:
        notes.append("no positive-spending rows; simulated spending carries the last value forward")

    # (4) failure hazard on every at-risk day
    data4, w4 = sub(live)
    if len(np.unique(data4["fail"].to_numpy())) < 2:
        raise ValueError(f"cannot fit a hazard model: every {spec.era}-era training row has the same outcome")
    bind_all = None if bind_table is None else np.ones(len(bind_table), dtype=bool)
    hazard_model = _fit_named(
        "hazard", "binomial-logit",
        design(spec.hazard_design, data4, bind_all) if reuse is None else reuse.hazard_model.design,
        data4, "fail", w4, reuse.hazard_model if reuse else None,
    )

    return FittedModelSet(
        era=spec.era,
        arm=spec.arm,
        u_star=spec.u_star,
        h=spec.h,
        horizon=horizon,
        hazard_model=hazard_model,
        rxb_model=rxb_model,
        rxb_constant=rxb_constant,
        oop_pos_model=oop_pos_model,
        oop_pos_constant=oop_pos_constant,
        oop_model=oop_model,
        oop_reciprocal=spec.oop_reciprocal,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# goodness of fit
# ---------------------------------------------------------------------------


def prediction_error_rates(models: FittedModelSet, table: pd.DataFrame) -> dict[str, float]:
    """Most-probable-value misclassification rates on held-out person-day
    rows, for the burden, spending-indicator, and hazard models."""
    t2 = table["t"].to_numpy() >= 2
    out: dict[str, float] = {}

    rows = table.loc[t2]
    if len(rows):
        if models.rxb_model is not None:
            pred = np.asarray(models.rxb_model.response_levels)[
                np.argmax(models.rxb_model.class_probs(rows), axis=1)
            ]
        else:
            pred = models.rxb_constant
        out["rxb"] = float(np.mean(pred != rows["rxb_cat"].to_numpy()))
        if models.oop_pos_model is not None:
            pred2 = (models.oop_pos_model.predict_prob(rows) > 0.5).astype(int)
        else:
            pred2 = models.oop_pos_constant
        out["oop_pos"] = float(np.mean(pred2 != rows["oop_pos"].to_numpy()))
    pred4 = (models.hazard_model.predict_prob(table) > 0.5).astype(int)
    out["hazard"] = float(np.mean(pred4 != table["fail"].to_numpy()))
    return out


def gamma_pit_kolmogorov(
    models: FittedModelSet,
    table: pd.DataFrame,
    rng: np.random.Generator,
    n_sim: int = 100,
) -> float | None:
    """Kolmogorov distance between uniformity and the probability-integral
    transform of observed positive spending under the fitted gamma model,
    with the PIT estimated from ``n_sim`` simulated outcomes per row."""
    if models.oop_model is None:
        return None
    mask = (table["t"].to_numpy() >= 2) & (table["oop_pos"].to_numpy() == 1)
    rows = table.loc[mask]
    if not len(rows):
        return None
    obs = rows["oop_asinh"].to_numpy()
    if models.oop_reciprocal:
        obs = 1.0 / obs
    mu = models.oop_model.predict_mean(rows)
    shape = models.oop_model.dispersion
    sims = rng.gamma(shape, mu / shape, size=(n_sim, len(rows)))
    below = np.mean(sims < obs[None, :], axis=0)
    at_or_below = np.mean(sims <= obs[None, :], axis=0)
    pit = np.sort((below + at_or_below) / 2.0)
    n = len(pit)
    grid = np.arange(1, n + 1) / n
    return float(np.max(np.maximum(np.abs(pit - grid), np.abs(pit - (grid - 1 / n)))))


# ---------------------------------------------------------------------------
# Monte Carlo engine
# ---------------------------------------------------------------------------


class _CachedEta:
    """Per-path linear predictors for one model, with contributions from
    path-constant columns computed once."""

    def __init__(self, model: FittedModel, static_frame: dict, n: int):
        coef = model.full_coef()
        if coef.ndim != 1:
            raise ValueError("the simulation engine only drives single-predictor families")
        self.static = np.zeros(n)
        self.dynamic: list[tuple[object, np.ndarray]] = []
        for term, sl in model.design.term_slices():
            c = coef[sl]
            if not np.any(c):
                continue
            cols = term.columns()
            if cols <= STATIC_COLS:
                self.static += term.matrix(static_frame, n) @ c
            else:
                self.dynamic.append((term, c))

    def eta(self, frame: dict, n: int) -> np.ndarray:
        e = self.static.copy()
        for term, c in self.dynamic:
            e += term.matrix(frame, n) @ c
        return e


def _simulate_block(
    models: FittedModelSet,
    regime: Regime,
    sampler: BaselineSampler,
    horizon: int,
    seed: int,
    block_index: int,
    n: int,
    g_path: np.ndarray,
) -> np.ndarray:
    rng = substream(seed, STAGE_PATHS, block_index)
    idx = sampler.draw(rng, n)

    hists = sampler.histories
    static = {
        "age": np.array([hists[i].baseline.age for i in idx]),
        "sex": np.array([hists[i].baseline.sex for i in idx], dtype=object),
        "race": np.array([hists[i].baseline.race for i in idx], dtype=object),
        "ses_cat": np.array([hists[i].baseline.ses for i in idx], dtype=np.int64),
        "cci_pos": np.array([int(hists[i].baseline.cci > 0) for i in idx], dtype=np.int64),
        "out_cat": np.array([min(hists[i].baseline.out, OUT_CAP) for i in idx], dtype=np.int64),
        "u": np.full(n, float(models.u_star)),
    }
    rxb = np.array([min(int(hists[i].rxb[0]), RXB_CAP) for i in idx], dtype=np.int64)
    oop_asinh = np.array([np.arcsinh(float(hists[i].oop[0])) for i in idx])
    oop_pos = (oop_asinh > 0).astype(np.int64)

    cache = {
        name: _CachedEta(m, static, n)
        for name, m in (
            ("rxb", models.rxb_model),
            ("oop_pos", models.oop_pos_model),
            ("oop", models.oop_model),
            ("hazard", models.hazard_model),
        )
        if m is not None
    }

    alive = np.ones(n, dtype=bool)
    counts = np.zeros(horizon, dtype=np.int64)
    zeros = np.zeros(n)

    def frame(t, rxb_prev, oop_asinh_prev, oop_pos_prev):
        return {
            "t": np.full(n, t, dtype=np.int64),
            "z_off": np.zeros(n, dtype=np.int64),
            "z2": np.full(n, g_path[t - 1]),
            "rxb_cat": rxb,
            "rxb_prev_cat": rxb_prev,
            "oop_asinh": oop_asinh,
            "oop_asinh_prev": oop_asinh_prev,
            "oop_pos": oop_pos,
            "oop_pos_prev": oop_pos_prev,
            **static,
        }

    for t in range(1, horizon + 1):
        rxb_prev, oop_asinh_prev, oop_pos_prev = rxb, oop_asinh, oop_pos
        if t >= 2:
            f = frame(t, rxb_prev, oop_asinh_prev, oop_pos_prev)
            if models.rxb_model is not None:
                rxb = models.rxb_model.sample_from_eta(rng, cache["rxb"].eta(f, n)).astype(np.int64)
            else:
                rxb = np.full(n, models.rxb_constant, dtype=np.int64)
            f["rxb_cat"] = rxb
            if models.oop_pos_model is not None:
                oop_pos = models.oop_pos_model.sample_from_eta(rng, cache["oop_pos"].eta(f, n)).astype(np.int64)
            else:
                oop_pos = np.full(n, models.oop_pos_constant, dtype=np.int64)
            if models.oop_model is not None:
                draw = models.oop_model.sample_from_eta(rng, cache["oop"].eta(f, n))
                value = (1.0 / draw) if models.oop_reciprocal else draw
            else:
                value = oop_asinh_prev  # no amount model: carry the last value
            oop_asinh = np.where(oop_pos == 1, value, zeros)
        f = frame(t, rxb_prev, oop_asinh_prev, oop_pos_prev)
        p = models.hazard_model.mean_from_eta(cache["hazard"].eta(f, n))
        fail = rng.random(n) < p
        alive &= ~fail
        counts[t - 1] = int(alive.sum())
    return counts


def gcomp_survival(
    models: FittedModelSet,
    regime: Regime,
    sampler: BaselineSampler,
    M: int,
    horizon: int,
    seed: int,
    jobs: int = 1,
) -> SurvivalCurve:
    """Counterfactual survival under the sustained regime, by Monte Carlo.

    Simulates ``M`` paths: a baseline row is drawn from ``sampler``, the
    initiation date is pinned to the cutoff, treatment follows the
    regime's form and cost path, covariates and failures are drawn day by
    day from the fitted models, and the curve reads off the fraction of
    paths still failure-free each day.

    Paths are simulated in fixed-size blocks, each on its own RNG
    substream of ``seed``, so the curve is bitwise identical for any
    ``jobs``.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if regime.arm != models.arm:
        raise ValueError(f"regime arm {regime.arm} does not match the {models.era}-era models (arm {models.arm})")
    g_path = regime_cost_path(regime, horizon)
    plan = blocks(M, PATH_BLOCK)
    if jobs > 1 and len(plan) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(
            delayed(_simulate_block)(models, regime, sampler, horizon, seed, b, stop - start, g_path)
            for b, start, stop in plan
        )
    else:
        results = [
            _simulate_block(models, regime, sampler, horizon, seed, b, stop - start, g_path)
            for b, start, stop in plan
        ]
    counts = np.sum(results, axis=0)
    values = np.concatenate(([1.0], counts / M))
    return SurvivalCurve(values=values, horizon=horizon)


def rmst(curve: SurvivalCurve, horizon: int | None = None) -> float:
    """Restricted mean survival time: the sum of S(t) over days 1..horizon
    (expected failure-free days out of the first ``horizon``)."""
    horizon = curve.horizon if horizon is None else horizon
    if horizon > curve.horizon:
        raise ValueError(f"curve only reaches day {curve.horizon}")
    return float(np.sum(curve.values[1 : horizon + 1]))


def rmst_difference(brand: SurvivalCurve, generic: SurvivalCurve) -> float:
    """RMST under sustained brand minus RMST under sustained generic."""
    if brand.horizon != generic.horizon:
        raise ValueError("curves have different horizons")
    return rmst(brand) - rmst(generic)
