"""Synthetic claims generator with fill-opportunity exposure dynamics,
temporal and time-varying confounding, and exact counterfactual truths.

Each simulated patient initiates venlafaxine on a calendar day U drawn
uniformly from a window spanning the cutover date; initiation form is
forced by era (brand before, generic after).  Exposure is modeled only at
*fill opportunities*: day 1, the day after a fill's supply runs out, and
every day while uncovered.  At an opportunity the patient continues their
era's form, switches to another venlafaxine product, or fills nothing; a
fill draws a days-supply and a log-normal out-of-pocket cost, and freezes
coverage for the supply window (costs accrue only on fill days).  A
binary daily burden state L* evolves from its own lag and yesterday's
coverage, and the failure hazard depends on burden, own-form coverage,
and a secular trend in U (none, linear, or a sine wave).

Eras carry separate coefficient sets, so the sustained-brand and
sustained-generic counterfactuals genuinely differ.  Truths under a
forced regime come either from Monte Carlo (`counterfactual_truth`) or,
because the burden state is a two-state Markov chain once exposure is
pinned, from an exact forward recursion (`exact_regime_truth`).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .domain import (
    BRAND,
    GENERIC,
    OTHER_VENLAFAXINE,
    DEFAULT_CUTOFF_DAY,
    DEFAULT_HORIZON,
    BaselineCovariates,
    PatientHistory,
    offset_date,
)
from .km import SurvivalCurve
from .rng import STAGE_PATHS, STAGE_PATIENTS, substream

__all__ = [
    "EraParams",
    "SimScenario",
    "ArmPlan",
    "simulate_dataset",
    "export_tables",
    "counterfactual_truth",
    "exact_regime_truth",
    "study_arms",
    "linear_scenario",
    "sine_scenario",
    "null_scenario",
]

DAYS_PER_YEAR = 365.25
SUPPLY_SUPPORT = np.array([30, 60, 90])

RACES = ("white", "black", "hispanic", "asian", "other")
RACE_PROBS = (0.62, 0.14, 0.12, 0.07, 0.05)


@dataclass(frozen=True)
class EraParams:
    """One era's generating coefficients.

    Hazard (daily failure): logit p = b0 + b_l*L + b_z*onform + trend(U).
    Burden transition:      logit P(L_t=1) = a0 + a_l*L_{t-1} + a_z*onform_{t-1},
    with P(L_1=1) = l1_prob.
    Fill choice at an opportunity (multinomial logit, continue = reference):
      eta_other = f0_other + f_l_other*L + f_u_other*years-from-cutoff
      eta_none  = f0_none  + f_l_none*L  + f_u_none*years-from-cutoff
    Days supply over {30, 60, 90}; cost of a fill is log-normal around the
    era's base cost (discounted for non-era forms, scaled in supply).
    """

    b0: float
    b_l: float
    b_z: float
    a0: float
    a_l: float
    a_z: float
    l1_prob: float
    f0_other: float
    f_l_other: float
    f_u_other: float
    f0_none: float
    f_l_none: float
    f_u_none: float
    d_probs_own: tuple[float, float, float]
    d_probs_other: tuple[float, float, float]
    cost_base: float
    cost_other_factor: float
    cost_d_coef: float
    cost_sigma: float

    def __post_init__(self):
        for name in ("d_probs_own", "d_probs_other"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be 3 nonnegative probabilities summing to 1")
        if not 0.0 <= self.l1_prob <= 1.0:
            raise ValueError("l1_prob must be a probability")
        if self.cost_base <= 0 or self.cost_other_factor <= 0 or self.cost_sigma < 0:
            raise ValueError("cost parameters must be positive (sigma nonnegative)")


@dataclass(frozen=True)
class SimScenario:
    """A complete data-generating process: per-era coefficients plus the
    secular-trend shape shared by both eras.

    ``trend``: "none", "linear" (slope ``beta_u`` per year, centered at
    the cutoff so the hazard at the cutoff is trend-free), or "sine"
    (amplitude ``beta_u`` on sin(U / u_bar)).
    """

    name: str
    brand: EraParams
    generic: EraParams
    trend: str = "none"
    beta_u: float = 0.0
    u_bar: float = 250.0
    u_star: int = DEFAULT_CUTOFF_DAY
    u_halfwidth: int = 1095
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        if self.trend not in ("none", "linear", "sine"):
            raise ValueError(f"unknown trend shape {self.trend!r}")
        if self.u_halfwidth < 1 or self.horizon < 1:
            raise ValueError("u_halfwidth and horizon must be positive")
        if self.u_bar <= 0:
            raise ValueError("u_bar must be positive")

    # -- model formulas ------------------------------------------------------

    def trend_term(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.trend == "linear":
            return self.beta_u * (u - self.u_star) / DAYS_PER_YEAR
        if self.trend == "sine":
            return self.beta_u * np.sin(u / self.u_bar)
        return np.zeros_like(u)

    def hazard_prob(self, era: EraParams, l, onform, u) -> np.ndarray:
        """Daily failure probability given burden, own-form coverage, and
        initiation date."""
        return expit(era.b0 + era.b_l * np.asarray(l) + era.b_z * np.asarray(onform) + self.trend_term(u))

    def era_of(self, u) -> EraParams:
        return self.brand if u < self.u_star else self.generic

    def arm_of(self, u) -> int:
        return BRAND if u < self.u_star else GENERIC

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        for era in ("brand", "generic"):
            d[era]["d_probs_own"] = list(d[era]["d_probs_own"])
            d[era]["d_probs_other"] = list(d[era]["d_probs_other"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        d = dict(d)
        for era in ("brand", "generic"):
            e = dict(d[era])
            e["d_probs_own"] = tuple(e["d_probs_own"])
            e["d_probs_other"] = tuple(e["d_probs_other"])
            d[era] = EraParams(**e)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, s: str) -> "SimScenario":
        return cls.from_dict(json.loads(s))


def _era_vector(scenario: SimScenario, is_brand: np.ndarray, attr: str) -> np.ndarray:
    b, g = getattr(scenario.brand, attr), getattr(scenario.generic, attr)
    return np.where(is_brand, float(b), float(g))


def simulate_dataset(scenario: SimScenario, n: int, seed: int) -> list[PatientHistory]:
    """Simulate ``n`` patient histories under the scenario.

    Deterministic in (scenario, n, seed).  No random censoring: every
    patient either fails or reaches the horizon.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = substream(seed, STAGE_PATIENTS)
    sc = scenario
    horizon = sc.horizon

    u = rng.integers(sc.u_star - sc.u_halfwidth, sc.u_star + sc.u_halfwidth + 1, size=n)
    is_brand = u < sc.u_star
    arm = np.where(is_brand, BRAND, GENERIC).astype(np.int8)
    uy = (u - sc.u_star) / DAYS_PER_YEAR
    trend = sc.trend_term(u)

    # decorative baseline covariates (not part of the generating hazard)
    age = np.clip(rng.normal(46.0, 12.0, n), 18.0, 90.0)
    sex = np.where(rng.random(n) < 0.55, "F", "M")
    race = np.asarray(RACES, dtype=object)[rng.choice(len(RACES), size=n, p=RACE_PROBS)]
    ses = rng.integers(0, 10, size=n)
    cci = rng.poisson(0.8, n)
    out = rng.poisson(0.6, n)

    b0 = _era_vector(sc, is_brand, "b0")
    b_l = _era_vector(sc, is_brand, "b_l")
    b_z = _era_vector(sc, is_brand, "b_z")
    a0 = _era_vector(sc, is_brand, "a0")
    a_l = _era_vector(sc, is_brand, "a_l")
    a_z = _era_vector(sc, is_brand, "a_z")
    l1p = _era_vector(sc, is_brand, "l1_prob")
    f0_o = _era_vector(sc, is_brand, "f0_other")
    f_l_o = _era_vector(sc, is_brand, "f_l_other")
    f_u_o = _era_vector(sc, is_brand, "f_u_other")
    f0_n = _era_vector(sc, is_brand, "f0_none")
    f_l_n = _era_vector(sc, is_brand, "f_l_none")
    f_u_n = _era_vector(sc, is_brand, "f_u_none")
    d_own = np.where(is_brand[:, None], sc.brand.d_probs_own, sc.generic.d_probs_own)
    d_oth = np.where(is_brand[:, None], sc.brand.d_probs_other, sc.generic.d_probs_other)
    c_base = _era_vector(sc, is_brand, "cost_base")
    c_fac = _era_vector(sc, is_brand, "cost_other_factor")
    c_d = _era_vector(sc, is_brand, "cost_d_coef")
    c_sig = _era_vector(sc, is_brand, "cost_sigma")

    z1_mat = np.zeros((horizon, n), dtype=np.int8)
    z2_mat = np.zeros((horizon, n))
    l_mat = np.zeros((horizon, n), dtype=np.int16)

    L = (rng.random(n) < l1p).astype(np.int8)
    covered_form = np.zeros(n, dtype=np.int8)
    covered_until = np.zeros(n, dtype=np.int64)  # last covered day, 0 = none
    z2cum = np.zeros(n)
    onform_prev = np.zeros(n, dtype=np.int8)
    fail_day = np.zeros(n, dtype=np.int64)

    for t in range(1, horizon + 1):
        if t >= 2:
            pl = expit(a0 + a_l * L + a_z * onform_prev)
            L = (rng.random(n) < pl).astype(np.int8)

        opp = t > covered_until
        u_class = rng.random(n)
        if t == 1:
            new_form = arm.copy()  # the initiating fill is forced
        else:
            eta_o = np.clip(f0_o + f_l_o * L + f_u_o * uy, -30.0, 30.0)
            eta_n = np.clip(f0_n + f_l_n * L + f_u_n * uy, -30.0, 30.0)
            denom = 1.0 + np.exp(eta_o) + np.exp(eta_n)
            p_cont = 1.0 / denom
            p_other = np.exp(eta_o) / denom
            new_form = np.where(
                u_class < p_cont, arm,
                np.where(u_class < p_cont + p_other, OTHER_VENLAFAXINE, 0),
            ).astype(np.int8)

        u_supply = rng.random(n)
        probs = np.where((new_form == arm)[:, None], d_own, d_oth)
        idx = (u_supply[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
        supply = np.where(new_form == 0, 1, SUPPLY_SUPPORT[np.minimum(idx, 2)])

        z_cost = rng.normal(size=n)
        mu = np.log(c_base * np.where(new_form == arm, 1.0, c_fac)) + c_d * np.log(supply / 30.0)
        cost = np.where(new_form == 0, 0.0, np.exp(mu + c_sig * z_cost))

        covered_form = np.where(opp, new_form, covered_form)
        covered_until = np.where(opp, t + supply - 1, covered_until)
        z2cum = z2cum + np.where(opp, cost, 0.0)

        z1_t = covered_form
        onform = (z1_t == arm).astype(np.int8)
        z1_mat[t - 1] = z1_t
        z2_mat[t - 1] = z2cum
        l_mat[t - 1] = L

        q = expit(b0 + b_l * L + b_z * onform + trend)
        fail = (rng.random(n) < q) & (fail_day == 0)
        fail_day[fail] = t
        onform_prev = onform

    histories = []
    for i in range(n):
        y = int(fail_day[i]) if fail_day[i] else horizon
        delta = int(fail_day[i] > 0)
        h = PatientHistory(
            pid=f"sim{i:06d}",
            u=int(u[i]),
            baseline=BaselineCovariates(
                age=float(age[i]),
                sex=str(sex[i]),
                race=str(race[i]),
                ses=int(ses[i]),
                cci=int(cci[i]),
                out=int(out[i]),
                rxb1=int(l_mat[0, i]),
                oop1=0.0,
            ),
            z1=z1_mat[:y, i].copy(),
            z2=z2_mat[:y, i].copy(),
            rxb=l_mat[:y, i].copy(),
            oop=np.zeros(y),
            y=y,
            delta=delta,
        )
        h.validate(horizon)
        histories.append(h)
    return histories


def _venlafaxine_fills(h: PatientHistory) -> list[tuple[int, int, int, float]]:
    """(day, form, days_supply, cost) rows reconstructed from the coverage
    and cumulative-cost paths.  A fill is a coverage-run start or a cost
    jump inside a run; supplies are truncated at the end of follow-up."""
    fills = []
    t = 0
    while t < h.y:
        if h.z1[t] == 0:
            t += 1
            continue
        form = h.z1[t]
        end = t
        while end + 1 < h.y and h.z1[end + 1] == form:
            end += 1
        days = [t] + [k for k in range(t + 1, end + 1) if h.z2[k] > h.z2[k - 1]]
        for j, d in enumerate(days):
            until = days[j + 1] - 1 if j + 1 < len(days) else end
            cost = float(h.z2[d] - (h.z2[d - 1] if d else 0.0))
            fills.append((d + 1, int(form), until - d + 1, cost))
        t = end + 1
    return fills


def _burden_runs(h: PatientHistory) -> list[tuple[int, int]]:
    """(start day, length) of maximal runs with positive burden."""
    runs = []
    t = 0
    while t < h.y:
        if h.rxb[t] > 0:
            end = t
            while end + 1 < h.y and h.rxb[end + 1] > 0:
                end += 1
            runs.append((t + 1, end - t + 1))
            t = end + 1
        else:
            t += 1
    return runs


def export_tables(histories: Sequence[PatientHistory]):
    """Render simulated histories in the ingestion schema: a patients
    table, a fills table (venlafaxine fills plus burden spells as
    zero-cost non-venlafaxine rows), and an events table."""
    import pandas as pd

    pat_rows, fill_rows, event_rows = [], [], []
    for h in histories:
        b = h.baseline
        init = offset_date(h.u)
        pat_rows.append({
            "id": h.pid, "init_date": init, "age": b.age, "sex": b.sex,
            "race": b.race, "ses": b.ses, "cci": b.cci, "out": b.out,
            "oop_1": b.oop1, "rxb_1": b.rxb1,
        })
        for day, form, ds, cost in _venlafaxine_fills(h):
            fill_rows.append({
                "id": h.pid, "date": offset_date(h.u + day - 1), "form": form,
                "days_supply": ds, "oop_cost": round(cost, 2),
            })
        for day, length in _burden_runs(h):
            fill_rows.append({
                "id": h.pid, "date": offset_date(h.u + day - 1), "form": 0,
                "days_supply": length, "oop_cost": 0.0,
            })
        if h.delta:
            event_rows.append({
                "id": h.pid, "date": offset_date(h.u + h.y - 1), "kind": "hospitalization",
            })
    patients = pd.DataFrame(pat_rows)
    fills = pd.DataFrame(fill_rows, columns=["id", "date", "form", "days_supply", "oop_cost"])
    events = pd.DataFrame(event_rows, columns=["id", "date", "kind"])
    return patients, fills, events


@dataclass
class TruthResult:
    """A regime's counterfactual survival at the cutoff: the curve, its
    restricted mean, and (for Monte Carlo results) the MC standard error
    of the restricted mean."""

    curve: SurvivalCurve
    rmst: float
    rmst_mc_se: float = 0.0


def counterfactual_truth(scenario: SimScenario, arm: int, N: int, seed: int) -> TruthResult:
    """Monte Carlo truth under the sustained regime of ``arm``: exposure
    pinned to the era's own form every day, initiation pinned to the
    cutoff, no censoring."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if arm not in (BRAND, GENERIC):
        raise ValueError(f"arm must be {BRAND} (brand) or {GENERIC} (generic)")
    sc = scenario
    era = sc.brand if arm == BRAND else sc.generic
    rng = substream(seed, STAGE_PATHS, arm)
    trend = float(sc.trend_term(sc.u_star))
    q = expit(np.array([era.b0 + era.b_z + trend, era.b0 + era.b_l + era.b_z + trend]))
    p_trans = expit(np.array([era.a0 + era.a_z, era.a0 + era.a_l + era.a_z]))

    L = (rng.random(N) < era.l1_prob).astype(np.int8)
    alive = np.ones(N, dtype=bool)
    days_alive = np.zeros(N, dtype=np.int64)
    counts = np.zeros(sc.horizon, dtype=np.int64)
    for t in range(1, sc.horizon + 1):
        if t >= 2:
            L = (rng.random(N) < p_trans[L]).astype(np.int8)
        alive &= rng.random(N) >= q[L]
        days_alive += alive
        counts[t - 1] = int(alive.sum())
    values = np.concatenate(([1.0], counts / N))
    rmst = float(days_alive.mean())
    mc_se = float(days_alive.std(ddof=1) / np.sqrt(N))
    return TruthResult(curve=SurvivalCurve(values=values, horizon=sc.horizon), rmst=rmst, rmst_mc_se=mc_se)


def exact_regime_truth(scenario: SimScenario, arm: int) -> TruthResult:
    """Exact counterfactual truth by forward recursion.

    With exposure pinned and initiation at the cutoff, the burden state is
    a two-state Markov chain and the hazard depends only on the current
    state, so survival follows from propagating the (alive, burden) mass
    one day at a time — no Monte Carlo error."""
    if arm not in (BRAND, GENERIC):
        raise ValueError(f"arm must be {BRAND} (brand) or {GENERIC} (generic)")
    sc = scenario
    era = sc.brand if arm == BRAND else sc.generic
    trend = float(sc.trend_term(sc.u_star))
    q = expit(np.array([era.b0 + era.b_z + trend, era.b0 + era.b_l + era.b_z + trend]))
    p1 = expit(np.array([era.a0 + era.a_z, era.a0 + era.a_l + era.a_z]))

    mass = np.array([1.0 - era.l1_prob, era.l1_prob])
    values = [1.0]
    for t in range(1, sc.horizon + 1):
        if t >= 2:
            mass = np.array([
                mass[0] * (1 - p1[0]) + mass[1] * (1 - p1[1]),
                mass[0] * p1[0] + mass[1] * p1[1],
            ])
        mass = mass * (1.0 - q)
        values.append(float(mass.sum()))
    curve = SurvivalCurve(values=np.asarray(values), horizon=sc.horizon)
    return TruthResult(curve=curve, rmst=float(np.sum(values[1:])), rmst_mc_se=0.0)


@dataclass(frozen=True)
class ArmPlan:
    """One analysis configuration of the simulation study: whether the
    initiation-date terms stay in the fitted models (with kernel-weighted
    baseline sampling), and whether the burden state is adjusted for."""

    name: str
    adjust_temporal: bool
    adjust_time_varying: bool


def study_arms() -> list[ArmPlan]:
    """The four analysis configurations compared by the simulation study."""
    return [
        ArmPlan("Both", adjust_temporal=True, adjust_time_varying=True),
        ArmPlan("Time-varying", adjust_temporal=False, adjust_time_varying=True),
        ArmPlan("Temporal", adjust_temporal=True, adjust_time_varying=False),
        ArmPlan("Neither", adjust_temporal=False, adjust_time_varying=False),
    ]


# ---------------------------------------------------------------------------
# bundled scenarios
# ---------------------------------------------------------------------------

def _base_era(**overrides) -> EraParams:
    base = dict(
        b0=-6.6, b_l=0.8, b_z=-0.5,
        a0=-2.5, a_l=4.0, a_z=-0.3, l1_prob=0.3,
        f0_other=-3.2, f_l_other=0.4, f_u_other=0.0,
        f0_none=-2.2, f_l_none=0.8, f_u_none=0.0,
        d_probs_own=(0.7, 0.2, 0.1), d_probs_other=(0.8, 0.15, 0.05),
        cost_base=10.0, cost_other_factor=0.6, cost_d_coef=1.0, cost_sigma=0.25,
    )
    base.update(overrides)
    return EraParams(**base)


def linear_scenario() -> SimScenario:
    """Secular trend linear in the initiation date; the generic era is
    slightly harsher at baseline, so the sustained-brand regime truly
    survives longer."""
    return SimScenario(
        name="linear",
        brand=_base_era(),
        generic=_base_era(b0=-6.45),
        trend="linear",
        beta_u=0.25,
    )


def sine_scenario() -> SimScenario:
    """Secular trend follows a sine wave in the initiation date (one full
    period across the six-year initiation window, rising through zero at
    the cutoff), a shape the analysis does not know."""
    return SimScenario(
        name="sine",
        brand=_base_era(),
        generic=_base_era(b0=-6.45),
        trend="sine",
        beta_u=0.8,
        u_bar=13368 / (12 * math.pi),
    )


def null_scenario() -> SimScenario:
    """No secular trend and identical eras: the true regime difference is
    exactly zero."""
    era = _base_era()
    return SimScenario(name="null", brand=era, generic=era, trend="none", beta_u=0.0)
