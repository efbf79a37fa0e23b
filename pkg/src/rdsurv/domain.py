"""Core domain objects: patient histories, treatment regimes, and the
rules that turn raw dispensing/event records into daily exposure and
outcome series.

Conventions
-----------
* Dates are integer day offsets from 1970-01-01.  Follow-up day ``t`` of
  a patient who initiated on date ``u`` is calendar date ``u + (t - 1)``,
  so day 1 is the initiation date itself.
* ``fills.form`` codes: 1 = immediate-release brand, 2 = immediate-release
  generic, 3 = any other venlafaxine product, 0 = a non-venlafaxine
  prescription (used to derive the prescription-burden and pharmacy-cost
  covariates; may be dated before initiation).
* A prescription is on hand from its fill day through ``fill day +
  days_supply - 1``.  The trailing cost window for day ``t`` is the 180
  days strictly before ``t``.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "BRAND",
    "GENERIC",
    "OTHER_VENLAFAXINE",
    "NON_VENLAFAXINE",
    "DEFAULT_CUTOFF_DAY",
    "DEFAULT_HORIZON",
    "FAILURE_KINDS",
    "CENSOR_KIND",
    "day_offset",
    "offset_date",
    "BaselineCovariates",
    "PatientHistory",
    "Regime",
    "regime_cost",
    "regime_cost_path",
    "derive_exposure",
    "derive_covariates",
    "derive_failure",
    "adherence_prefix",
    "load_histories",
    "IngestionError",
]

BRAND = 1
GENERIC = 2
OTHER_VENLAFAXINE = 3
NON_VENLAFAXINE = 0

_EPOCH = _dt.date(1970, 1, 1)

#: Day the generic entered the market: 2006-08-08.
DEFAULT_CUTOFF_DAY = 13368

DEFAULT_HORIZON = 270

#: Event kinds that count toward the composite failure outcome.
FAILURE_KINDS = frozenset({"treatment_change", "self_harm", "hospitalization", "ed_visit", "death"})
CENSOR_KIND = "disenrollment"

COST_WINDOW = 180  # trailing days for the out-of-pocket cost covariate


def day_offset(value) -> int:
    """Integer day offset from 1970-01-01 for an ISO date string, a
    ``datetime.date``, or something already integral."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, _dt.date):
        return (value - _EPOCH).days
    if isinstance(value, float) and float(value).is_integer():
        return int(value)
    if isinstance(value, str):
        return (_dt.date.fromisoformat(value) - _EPOCH).days
    raise ValueError(f"cannot interpret {value!r} as a date")


def offset_date(offset: int) -> _dt.date:
    return _EPOCH + _dt.timedelta(days=int(offset))


@dataclass(frozen=True)
class BaselineCovariates:
    """Covariates frozen at initiation (day 1)."""

    age: float
    sex: str
    race: str
    ses: int          # neighbourhood deprivation decile, 0 (least) .. 9 (most)
    cci: int          # comorbidity index
    out: int          # outpatient mental-health visits in the prior 180 days
    rxb1: int         # non-venlafaxine prescriptions on hand on day 1
    oop1: float       # non-venlafaxine out-of-pocket cost in the 180 days before day 1


@dataclass
class PatientHistory:
    """One patient's follow-up: daily exposure/covariate series of length
    ``y`` plus the composite-failure outcome ``(y, delta)``."""

    pid: str
    u: int                      # initiation date (day offset)
    baseline: BaselineCovariates
    z1: np.ndarray              # treatment form on hand each day (0/1/2/3)
    z2: np.ndarray              # cumulative venlafaxine out-of-pocket cost
    rxb: np.ndarray             # non-venlafaxine prescriptions on hand
    oop: np.ndarray             # trailing-180-day non-venlafaxine cost
    y: int                      # failure or censoring day (1-based)
    delta: int                  # 1 = composite failure, 0 = censored

    @property
    def arm(self) -> int:
        return int(self.z1[0])

    def validate(self, horizon: int = DEFAULT_HORIZON) -> None:
        if not (1 <= self.y <= horizon):
            raise ValueError(f"{self.pid}: y={self.y} outside 1..{horizon}")
        if self.delta not in (0, 1):
            raise ValueError(f"{self.pid}: delta must be 0/1")
        for name in ("z1", "z2", "rxb", "oop"):
            if len(getattr(self, name)) != self.y:
                raise ValueError(f"{self.pid}: {name} has length {len(getattr(self, name))}, expected y={self.y}")
        if self.z1[0] not in (BRAND, GENERIC):
            raise ValueError(f"{self.pid}: day-1 exposure must be an immediate-release form, got {self.z1[0]}")
        if np.any(np.diff(self.z2) < 0) or self.z2[0] < 0:
            raise ValueError(f"{self.pid}: cumulative cost must be non-decreasing and non-negative")
        if np.any(self.rxb < 0) or np.any(self.oop < 0):
            raise ValueError(f"{self.pid}: covariates must be non-negative")


@dataclass(frozen=True)
class Regime:
    """A sustained-treatment strategy: fill a 30-day supply of one
    immediate-release form on day 1 and every 30 days after, paying
    ``fill_cost`` each time."""

    arm: int                 # BRAND or GENERIC
    fill_cost: float
    fill_interval: int = 30

    def __post_init__(self):
        if self.arm not in (BRAND, GENERIC):
            raise ValueError("regime arm must be 1 (brand) or 2 (generic)")
        if self.fill_cost < 0:
            raise ValueError("fill cost must be non-negative")


def regime_cost(regime: Regime, t: int) -> float:
    """Cumulative regime cost through day ``t`` (fills on days 1, 31, 61, ...)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    fills = (t - 1) // regime.fill_interval + 1
    return regime.fill_cost * fills


def regime_cost_path(regime: Regime, horizon: int) -> np.ndarray:
    t = np.arange(1, horizon + 1)
    return regime.fill_cost * ((t - 1) // regime.fill_interval + 1).astype(float)


# ---------------------------------------------------------------------------
# daily series derivation
# ---------------------------------------------------------------------------


def derive_exposure(
    fills: Sequence[tuple[int, int, int, float]],
    horizon: int,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Daily venlafaxine exposure from one patient's venlafaxine fills.

    ``fills`` rows are ``(day, form, days_supply, cost)`` with ``day``
    patient-relative (initiation day = 1) and ``form`` in {1, 2, 3}; rows
    must be in file order.  Returns ``(z1, z2, warnings)`` over days
    1..horizon.

    Rules: a refill of the same form while supply remains adds its days
    supply to the stock; a fill of a different form while supply remains
    truncates the old supply that day (the patient is assumed to switch);
    on same-day fills of different forms the later record wins the
    coverage (warning) though both costs count toward the cumulative
    out-of-pocket total.
    """
    z1 = np.zeros(horizon, dtype=np.int8)
    cost_jump = np.zeros(horizon + 1)
    warnings: list[str] = []

    ordered = sorted(enumerate(fills), key=lambda kv: (kv[1][0], kv[0]))
    cur_form = 0
    seg_start = 0
    cur_end = 0  # exclusive
    prev_day = None
    prev_day_forms: set[int] = set()

    def flush(upto: int) -> None:
        if cur_form != 0:
            lo, hi = max(seg_start, 1), min(upto, horizon + 1)
            if hi > lo:
                z1[lo - 1 : hi - 1] = cur_form

    for _, (day, form, ds, cost) in ordered:
        day, form, ds = int(day), int(form), int(ds)
        if form not in (BRAND, GENERIC, OTHER_VENLAFAXINE):
            raise ValueError(f"venlafaxine fill has form {form}; expected 1, 2 or 3")
        if ds < 1:
            raise ValueError("days_supply must be >= 1")
        if day < 1:
            raise ValueError("venlafaxine fill dated before initiation")
        if 1 <= day <= horizon:
            cost_jump[day - 1] += float(cost)
        if day == prev_day:
            if form not in prev_day_forms and prev_day_forms:
                warnings.append(f"same-day fills of different forms on day {day}; later record wins")
            prev_day_forms.add(form)
        else:
            prev_day, prev_day_forms = day, {form}
        if day > horizon:
            continue
        if cur_form != 0 and day < cur_end and form == cur_form:
            cur_end += ds  # stockpiling: days supplies add up
            continue
        flush(min(day, cur_end))
        cur_form, seg_start, cur_end = form, day, day + ds
    flush(cur_end)

    z2 = np.cumsum(cost_jump[:horizon])
    return z1, z2, warnings


def derive_covariates(
    other_fills: Sequence[tuple[int, int, float]],
    horizon: int,
    fallback: tuple[int, float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Daily prescription burden and trailing cost from non-venlafaxine fills.

    ``other_fills`` rows are ``(day, days_supply, cost)``; days may be
    non-positive (pre-initiation history counts toward day-1 values).
    With no rows at all, the ``fallback`` pair ``(rxb1, oop1)`` is carried
    forward as a constant series.
    """
    if len(other_fills) == 0:
        rxb1, oop1 = (0, 0.0) if fallback is None else fallback
        return (
            np.full(horizon, int(rxb1), dtype=np.int16),
            np.full(horizon, float(oop1)),
        )
    rxb_diff = np.zeros(horizon + 1, dtype=np.int32)
    oop_diff = np.zeros(horizon + 1)
    for day, ds, cost in other_fills:
        day, ds = int(day), int(ds)
        if ds < 1:
            raise ValueError("days_supply must be >= 1")
        # on hand days [day, day + ds - 1]
        lo, hi = max(day, 1), min(day + ds - 1, horizon)
        if hi >= lo:
            rxb_diff[lo - 1] += 1
            rxb_diff[hi] -= 1
        # cost counts toward the trailing window of days day+1 .. day+180
        lo, hi = max(day + 1, 1), min(day + COST_WINDOW, horizon)
        if hi >= lo:
            oop_diff[lo - 1] += float(cost)
            oop_diff[hi] -= float(cost)
    rxb = np.cumsum(rxb_diff[:horizon]).astype(np.int16)
    oop = np.cumsum(oop_diff[:horizon])
    np.clip(oop, 0.0, None, out=oop)  # guard float cancellation
    return rxb, oop


def derive_failure(
    events: Sequence[tuple[int, str]],
    horizon: int,
) -> tuple[int, int]:
    """Composite-failure day and indicator from one patient's events.

    ``events`` rows are ``(day, kind)``.  The earliest failure-kind event,
    the earliest disenrollment, and the administrative horizon compete;
    a same-day tie between failure and disenrollment counts as failure.
    """
    fail_day = censor_day = horizon + 1
    for day, kind in events:
        day = int(day)
        if day < 1:
            raise ValueError("event dated before initiation")
        if kind in FAILURE_KINDS:
            fail_day = min(fail_day, day)
        elif kind == CENSOR_KIND:
            censor_day = min(censor_day, day)
        else:
            raise ValueError(f"unknown event kind {kind!r}")
    y = min(fail_day, censor_day, horizon)
    delta = 1 if fail_day == y else 0
    return y, delta


def adherence_prefix(history: PatientHistory, regime: Regime, atol: float = 1e-6) -> int:
    """Number of leading days on which the patient followed the regime
    exactly (form on hand and cumulative cost both match).  0 if day 1
    already deviates; capped at the observed follow-up ``y``."""
    n = history.y
    g = regime_cost_path(regime, n)
    ok = (history.z1 == regime.arm) & (np.abs(history.z2 - g) <= atol)
    bad = np.flatnonzero(~ok)
    return int(bad[0]) if bad.size else n


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


class IngestionError(ValueError):
    """Raised for malformed input tables; message names the patient id."""


_PATIENT_COLS = ["id", "init_date", "age", "sex", "race", "ses", "cci", "out", "oop_1", "rxb_1"]
_FILL_COLS = ["id", "date", "form", "days_supply", "oop_cost"]
_EVENT_COLS = ["id", "date", "kind"]


def _as_frame(src, required: list[str], what: str) -> pd.DataFrame:
    df = pd.read_csv(src) if not isinstance(src, pd.DataFrame) else src.copy()
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise IngestionError(f"{what} table is missing column(s) {missing}")
    return df


def load_histories(
    patients,
    fills,
    events,
    horizon: int = DEFAULT_HORIZON,
    washout_days: int | None = None,
) -> tuple[list[PatientHistory], list[str]]:
    """Build patient histories from the three input tables.

    Each argument is a CSV path or a DataFrame.  Returns the histories in
    patients-table order plus a list of data-quality warnings.  Hard
    violations (no day-1 immediate-release fill, venlafaxine dispensed
    before initiation, unknown ids, unparseable dates) raise
    :class:`IngestionError` naming the patient; with ``washout_days`` set,
    patients with pre-initiation venlafaxine are dropped with a warning
    instead.
    """
    pats = _as_frame(patients, _PATIENT_COLS, "patients")
    fl = _as_frame(fills, _FILL_COLS, "fills")
    ev = _as_frame(events, _EVENT_COLS, "events")

    ids = pats["id"].astype(str)
    if ids.duplicated().any():
        dup = ids[ids.duplicated()].iloc[0]
        raise IngestionError(f"duplicate patient id {dup!r} in patients table")
    known = set(ids)
    for name, frame in (("fills", fl), ("events", ev)):
        extra = set(frame["id"].astype(str)) - known
        if extra:
            raise IngestionError(f"{name} table references unknown patient id {sorted(extra)[0]!r}")

    fills_by = {pid: g for pid, g in fl.groupby(fl["id"].astype(str), sort=False)}
    events_by = {pid: g for pid, g in ev.groupby(ev["id"].astype(str), sort=False)}

    histories: list[PatientHistory] = []
    warnings: list[str] = []
    for row in pats.itertuples(index=False):
        pid = str(row.id)
        try:
            u = day_offset(row.init_date)
        except ValueError as e:
            raise IngestionError(f"patient {pid}: bad init_date ({e})") from None

        f = fills_by.get(pid)
        venla: list[tuple[int, int, int, float]] = []
        other: list[tuple[int, int, float]] = []
        washed_out = False
        if f is not None:
            for fr in f.itertuples(index=False):
                try:
                    day = day_offset(fr.date) - u + 1
                except ValueError as e:
                    raise IngestionError(f"patient {pid}: bad fill date ({e})") from None
                form = int(fr.form)
                if form == NON_VENLAFAXINE:
                    other.append((day, int(fr.days_supply), float(fr.oop_cost)))
                elif form in (BRAND, GENERIC, OTHER_VENLAFAXINE):
                    if day < 1:
                        if washout_days is not None:
                            washed_out = True
                        else:
                            raise IngestionError(
                                f"patient {pid}: venlafaxine fill dated before initiation"
                            )
                    venla.append((day, form, int(fr.days_supply), float(fr.oop_cost)))
                else:
                    raise IngestionError(f"patient {pid}: unknown fill form {form}")
        if washed_out:
            warnings.append(f"patient {pid}: dropped by washout filter (pre-initiation venlafaxine)")
            continue
        if not any(d == 1 and fm in (BRAND, GENERIC) for d, fm, _, _ in venla):
            raise IngestionError(
                f"patient {pid}: no immediate-release venlafaxine fill on the initiation date"
            )

        try:
            z1, z2, w = derive_exposure(venla, horizon)
        except ValueError as e:
            raise IngestionError(f"patient {pid}: {e}") from None
        warnings.extend(f"patient {pid}: {m}" for m in w)

        rxb1, oop1 = int(row.rxb_1), float(row.oop_1)
        rxb, oop = derive_covariates(other, horizon, fallback=(rxb1, oop1))
        if other:
            if rxb[0] != rxb1:
                warnings.append(
                    f"patient {pid}: derived day-1 prescription count {rxb[0]} != table value {rxb1}; using derived"
                )
            if abs(oop[0] - oop1) > 0.01:
                warnings.append(
                    f"patient {pid}: derived day-1 trailing cost {oop[0]:.2f} != table value {oop1:.2f}; using derived"
                )

        evs: list[tuple[int, str]] = []
        g = events_by.get(pid)
        if g is not None:
            for er in g.itertuples(index=False):
                try:
                    eday = day_offset(er.date) - u + 1
                except ValueError as e:
                    raise IngestionError(f"patient {pid}: bad event date ({e})") from None
                evs.append((eday, str(er.kind)))
        try:
            y, delta = derive_failure(evs, horizon)
        except ValueError as e:
            raise IngestionError(f"patient {pid}: {e}") from None

        baseline = BaselineCovariates(
            age=float(row.age),
            sex=str(row.sex),
            race=str(row.race),
            ses=int(row.ses),
            cci=int(row.cci),
            out=int(row.out),
            rxb1=int(rxb[0]),
            oop1=float(oop[0]),
        )
        hist = PatientHistory(
            pid=pid,
            u=u,
            baseline=baseline,
            z1=z1[:y],
            z2=z2[:y],
            rxb=rxb[:y],
            oop=oop[:y],
            y=y,
            delta=delta,
        )
        try:
            hist.validate(horizon)
        except ValueError as e:
            raise IngestionError(str(e)) from None
        histories.append(hist)
    return histories, warnings
