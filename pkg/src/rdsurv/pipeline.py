"""End-to-end analysis drivers.

``run_analysis`` wires the full chain — ingest the three claims tables,
split eras at the cutoff, fit each era's sequential models, standardize
to the sustained regimes by Monte Carlo, bootstrap the standard errors,
and write plot-ready CSVs plus a manifest and a plain-text summary.
``run_diagnostics`` emits the secular-trend diagnostics (monthly incident
use, per-month Kaplan–Meier 15th-percentile survival).

Everything is driven by one :class:`RunConfig`; all randomness descends
from its master seed through the documented stage substreams, so a rerun
with the same config writes byte-identical outputs regardless of the
job count.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .domain import (
    BRAND,
    GENERIC,
    DEFAULT_CUTOFF_DAY,
    DEFAULT_HORIZON,
    PatientHistory,
    Regime,
    load_histories,
    offset_date,
)
from .gcomp import (
    SequentialModelSpec,
    build_person_day_table,
    fit_sequential,
    gamma_pit_kolmogorov,
    gcomp_survival,
    prediction_error_rates,
    rmst,
    rmst_difference,
)
from .inference import (
    bootstrap,
    combine_partition_ses,
    confidence_interval,
    partition_patients,
)
from .km import SurvivalCurve, km_curve, survival_quantile
from .rdd import (
    ERA_BRAND,
    ERA_GENERIC,
    BaselineSampler,
    CutoffDesign,
    PositivityReport,
    positivity_diagnostics,
    split_eras,
)
from .rng import (
    STAGE_BOOTSTRAP,
    STAGE_HOLDOUT,
    STAGE_PARTITION,
    STAGE_PATHS,
    child_seed,
    substream,
)

__all__ = [
    "RunConfig",
    "PipelineError",
    "AnalysisResult",
    "BandwidthResult",
    "run_analysis",
    "run_diagnostics",
    "median_fill_cost",
]


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(f"stage {stage}: {e}") from e


@dataclass
class RunConfig:
    """Everything one run needs.  ``mode`` selects the driver; input
    tables may be CSV paths or in-memory DataFrames."""

    mode: str = "analyze"
    patients: object = None
    fills: object = None
    events: object = None
    out_dir: str = "results"
    u_star: int = DEFAULT_CUTOFF_DAY
    h: tuple[float, ...] = (365.0,)
    M: int = 5_000
    R: int = 50
    P: int = 1
    horizon: int = DEFAULT_HORIZON
    fill_cost: float | None = None  # per-fill regime cost; None = observed median
    seed: int = 0
    ci_multiplier: float = 1.96
    jobs: int = 1
    washout_days: int | None = None
    # simulate-study extras
    scenario: str | None = None
    replications: int = 200
    n_patients: int = 1_000

    def __post_init__(self):
        if isinstance(self.h, (int, float)):
            self.h = (float(self.h),)
        self.h = tuple(float(v) for v in self.h)

    def validate(self) -> None:
        if self.mode not in ("analyze", "simulate-study", "diagnose"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.h) == 0:
            raise ValueError("need at least one bandwidth h")
        if any(v <= 0 for v in self.h):
            raise ValueError("bandwidths must be positive")
        for name in ("M", "R", "P", "horizon", "replications", "n_patients", "jobs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive count")
        if self.ci_multiplier <= 0:
            raise ValueError("ci_multiplier must be positive")
        if self.fill_cost is not None and self.fill_cost < 0:
            raise ValueError("fill_cost must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h"] = list(self.h)
        # a worker count schedules the run without affecting its results,
        # so the recorded configuration leaves it out
        d.pop("jobs")
        for key in ("patients", "fills", "events"):
            if d[key] is not None and not isinstance(d[key], (str, os.PathLike)):
                d[key] = "<in-memory>"
            elif d[key] is not None:
                d[key] = str(d[key])
        return d


def median_fill_cost(histories: Sequence[PatientHistory], arm: int) -> float:
    """Median observed cost of an own-form fill (a day the cumulative
    venlafaxine cost jumps while that form is on hand), used as the
    sustained regime's per-fill cost when none is configured."""
    jumps: list[float] = []
    for h in histories:
        if h.arm != arm:
            continue
        d = np.diff(np.concatenate(([0.0], h.z2)))
        take = (h.z1 == arm) & (d > 0)
        jumps.extend(d[take])
    if not jumps:
        raise ValueError(
            f"no observed fills of form {arm}; pass an explicit regime fill cost"
        )
    return float(np.median(jumps))


@dataclass
class BandwidthResult:
    """Per-bandwidth outputs of one analysis."""

    h: float
    curves: dict[str, SurvivalCurve]
    km: dict[str, SurvivalCurve]
    rmst_by_era: dict[str, float]
    rmst_diff: float
    rmst_se: float
    ci: tuple[float, float]
    partition_diffs: list[float]
    partition_ses: list[float]
    positivity: dict[str, PositivityReport]
    gof: pd.DataFrame
    bootstrap_completed: dict[str, int] = field(default_factory=dict)


@dataclass
class AnalysisResult:
    config: RunConfig
    n_patients: int
    excluded: int
    ingest_warnings: list[str]
    bandwidths: list[BandwidthResult]
    files: list[str]
    regimes: dict[str, float]


def _h_tag(h: float) -> str:
    return str(int(h)) if float(h).is_integer() else f"{h:g}".replace(".", "p")


def _era_iter():
    return ((ERA_BRAND, BRAND), (ERA_GENERIC, GENERIC))


def _fit_point(era_name, arm, hists, design, config):
    spec = SequentialModelSpec(era=era_name, arm=arm, u_star=config.u_star, h=design.h)
    table = build_person_day_table(hists, arm, config.horizon)
    models = fit_sequential(None, spec, config.horizon, table=table)
    return spec, table, models


def _analyze_partition(part, h_idx, design, eras, regimes, config):
    """Point estimate plus bootstrap for one partition of both eras.

    ``eras`` maps era name -> (arm, patient list).  Returns per-era point
    curves (with bootstrap log-scale SEs attached), the RMST difference,
    and its bootstrap SE.
    """
    fits = {}
    for era_name, (arm, hists) in eras.items():
        spec, table, models = _staged(
            f"fit[{era_name}]", _fit_point, era_name, arm, hists, design, config
        )
        sampler = BaselineSampler(hists, design)
        curve = _staged(
            f"simulate[{era_name}]",
            gcomp_survival,
            models,
            regimes[era_name],
            sampler,
            config.M,
            config.horizon,
            child_seed(config.seed, STAGE_PATHS, h_idx, part, arm, 0),
            config.jobs,
        )
        fits[era_name] = (arm, hists, spec, table, models, curve)

    def analyze(mult, r):
        out = {}
        for era_name, (arm, hists, spec, table, models, _) in fits.items():
            m = fit_sequential(
                None, spec, config.horizon,
                table=table, patient_weights=mult[era_name], reuse=models,
            )
            sampler = BaselineSampler(hists, design, multiplicity=mult[era_name])
            out[era_name] = gcomp_survival(
                m, regimes[era_name], sampler, config.M, config.horizon,
                child_seed(config.seed, STAGE_PATHS, h_idx, part, arm, r + 1),
                config.jobs,
            )
        return out, rmst_difference(out[ERA_BRAND], out[ERA_GENERIC])

    boot = _staged(
        "bootstrap",
        bootstrap,
        {name: len(eras[name][1]) for name in eras},
        analyze,
        config.R,
        child_seed(config.seed, STAGE_BOOTSTRAP, h_idx, part),
    )

    curves = {}
    for era_name, (_, _, _, _, _, curve) in fits.items():
        curves[era_name] = SurvivalCurve(
            values=curve.values,
            horizon=curve.horizon,
            se_log=boot.se_log[era_name],
        )
    diff = rmst_difference(curves[ERA_BRAND], curves[ERA_GENERIC])
    return curves, diff, boot.rmst_diff_se, boot.completed


def _gof_frame(era_name, arm, hists, design, config, h_idx) -> pd.DataFrame:
    """Held-out goodness of fit: split the era's patients in two, fit on
    one half, score most-probable-value prediction errors and the
    spending model's randomized-quantile uniformity on the other."""
    rng = substream(config.seed, STAGE_HOLDOUT, h_idx, arm)
    if len(hists) < 4:
        return pd.DataFrame(columns=["era", "model", "metric", "value"])
    perm = rng.permutation(len(hists))
    half = len(hists) // 2
    train_w = np.zeros(len(hists))
    train_w[perm[:half]] = 1.0
    spec = SequentialModelSpec(era=era_name, arm=arm, u_star=config.u_star, h=design.h)
    table = build_person_day_table(hists, arm, config.horizon)
    # fit on the training half only, but bind factor levels and spline
    # knots on the whole era so scoring never meets an unknown level
    models = fit_sequential(
        None, spec, config.horizon,
        table=table, patient_weights=train_w, bind_table=table,
    )
    test_table = table.loc[train_w[table["pid_idx"].to_numpy()] == 0.0]
    rates = prediction_error_rates(models, test_table)
    rows = [
        {"era": era_name, "model": model, "metric": "holdout_error_rate", "value": rates[model]}
        for model in sorted(rates)
    ]
    pit = gamma_pit_kolmogorov(models, test_table, rng, n_sim=100)
    rows.append({
        "era": era_name, "model": "oop_amount", "metric": "pit_kolmogorov",
        "value": np.nan if pit is None else pit,
    })
    return pd.DataFrame(rows)


def run_analysis(config: RunConfig) -> AnalysisResult:
    """The full estimation pipeline, written to ``config.out_dir``.

    Per bandwidth: adjusted brand/generic survival curves with bootstrap
    SEs, unadjusted Kaplan–Meier curves, the RMST difference with SE and
    CI (partition-averaged when ``P > 1``), a day-by-day positivity
    report, and a held-out goodness-of-fit report.  Plus one JSON
    manifest and a plain-text summary for the whole run.
    """
    config.validate()
    histories, ingest_warnings = load_histories(
        config.patients, config.fills, config.events,
        horizon=config.horizon, washout_days=config.washout_days,
    )

    regimes = {}
    for era_name, arm in _era_iter():
        cost = config.fill_cost
        if cost is None:
            cost = _staged("regime-cost", median_fill_cost, histories, arm)
        regimes[era_name] = Regime(arm, float(cost))

    os.makedirs(config.out_dir, exist_ok=True)
    files: list[str] = []
    results: list[BandwidthResult] = []
    excluded_n = 0

    for h_idx, h in enumerate(config.h):
        design = CutoffDesign(config.u_star, h)
        brand_era, generic_era, excluded = _staged("split", split_eras, histories, design)
        excluded_n = len(excluded)

        # partition the cohort (P=1 keeps every patient in one piece)
        parts: list[dict[str, tuple[int, list[PatientHistory]]]] = []
        for p in range(config.P):
            parts.append({})
        for era_idx, (era_name, arm, era_hists) in enumerate(
            ((ERA_BRAND, BRAND, brand_era), (ERA_GENERIC, GENERIC, generic_era))
        ):
            if config.P == 1:
                parts[0][era_name] = (arm, era_hists)
                continue
            idx_groups = partition_patients(
                len(era_hists), config.P,
                child_seed(config.seed, STAGE_PARTITION, h_idx, era_idx),
            )
            for p, idx in enumerate(idx_groups):
                parts[p][era_name] = (arm, [era_hists[i] for i in idx])

        part_curves, part_diffs, part_ses, completed = [], [], [], {}
        for p, eras in enumerate(parts):
            curves, diff, se, done = _analyze_partition(p, h_idx, design, eras, regimes, config)
            part_curves.append(curves)
            part_diffs.append(diff)
            part_ses.append(se)
            completed[f"partition{p}"] = done

        diff_avg = float(np.mean(part_diffs))
        se_comb = combine_partition_ses(part_ses)
        ci = confidence_interval(diff_avg, se_comb, config.ci_multiplier)

        curves_avg: dict[str, SurvivalCurve] = {}
        rmst_by_era: dict[str, float] = {}
        for era_name, _ in _era_iter():
            vals = np.mean([pc[era_name].values for pc in part_curves], axis=0)
            ses = np.vstack([pc[era_name].se_log for pc in part_curves])
            se_log = np.sqrt(np.sum(ses**2, axis=0)) / config.P
            curves_avg[era_name] = SurvivalCurve(values=vals, horizon=config.horizon, se_log=se_log)
            rmst_by_era[era_name] = rmst(curves_avg[era_name])

        km = {
            ERA_BRAND: km_curve([(x.y, x.delta) for x in brand_era], config.horizon),
            ERA_GENERIC: km_curve([(x.y, x.delta) for x in generic_era], config.horizon),
        }
        positivity = {
            era_name: positivity_diagnostics(hists, regimes[era_name], config.horizon, era=era_name)
            for era_name, hists in ((ERA_BRAND, brand_era), (ERA_GENERIC, generic_era))
        }
        gof = _staged(
            "gof",
            lambda: pd.concat(
                [
                    _gof_frame(ERA_BRAND, BRAND, brand_era, design, config, h_idx),
                    _gof_frame(ERA_GENERIC, GENERIC, generic_era, design, config, h_idx),
                ],
                ignore_index=True,
            ),
        )

        tag = _h_tag(h)
        day = np.arange(config.horizon + 1)
        curve_frame = pd.DataFrame({
            "day": day,
            "brand": curves_avg[ERA_BRAND].values,
            "brand_se_log": curves_avg[ERA_BRAND].se_log,
            "generic": curves_avg[ERA_GENERIC].values,
            "generic_se_log": curves_avg[ERA_GENERIC].se_log,
            "km_brand": km[ERA_BRAND].values,
            "km_generic": km[ERA_GENERIC].values,
        })
        rmst_rows = [
            {
                "h": h, "partition": str(p + 1),
                "diff": part_diffs[p], "se": part_ses[p],
                "ci_lo": np.nan, "ci_hi": np.nan,
            }
            for p in range(config.P)
        ]
        rmst_rows.append({
            "h": h, "partition": "combined",
            "diff": diff_avg, "se": se_comb, "ci_lo": ci[0], "ci_hi": ci[1],
        })
        outputs = {
            f"curves_h{tag}.csv": curve_frame,
            f"rmst_h{tag}.csv": pd.DataFrame(rmst_rows),
            f"positivity_h{tag}.csv": pd.concat(
                [positivity[e].to_frame() for e, _ in _era_iter()], ignore_index=True
            ),
            f"gof_h{tag}.csv": gof,
        }
        for name, frame in outputs.items():
            path = os.path.join(config.out_dir, name)
            frame.to_csv(path, index=False)
            files.append(name)

        results.append(BandwidthResult(
            h=h, curves=curves_avg, km=km, rmst_by_era=rmst_by_era,
            rmst_diff=diff_avg, rmst_se=se_comb, ci=ci,
            partition_diffs=part_diffs, partition_ses=part_ses,
            positivity=positivity, gof=gof, bootstrap_completed=completed,
        ))

    result = AnalysisResult(
        config=config,
        n_patients=len(histories),
        excluded=excluded_n,
        ingest_warnings=ingest_warnings,
        bandwidths=results,
        files=files,
        regimes={e: regimes[e].fill_cost for e, _ in _era_iter()},
    )
    _write_run_files(result)
    return result


def _write_run_files(result: AnalysisResult) -> None:
    config = result.config
    manifest = {
        "mode": config.mode,
        "config": config.to_dict(),
        "n_patients": result.n_patients,
        "excluded": result.excluded,
        "ingestion_warnings": result.ingest_warnings,
        "regime_fill_costs": result.regimes,
        "files": sorted(result.files) + ["summary.txt"],
        "seed_plan": {
            "master": config.seed,
            "stages": {
                "paths": "child_seed(master, STAGE_PATHS, h_index, partition, arm, resample)",
                "bootstrap": "child_seed(master, STAGE_BOOTSTRAP, h_index, partition)",
                "partition": "child_seed(master, STAGE_PARTITION, h_index, era_index)",
                "holdout": "substream(master, STAGE_HOLDOUT, h_index, arm)",
            },
        },
    }
    with open(os.path.join(config.out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    result.files.append("manifest.json")

    lines = [
        "Sustained brand vs generic: counterfactual survival at the cutoff",
        f"patients {result.n_patients}, excluded {result.excluded}, "
        f"regime fill costs brand {result.regimes[ERA_BRAND]:.2f} generic {result.regimes[ERA_GENERIC]:.2f}",
        "",
        f"{'h':>6}  {'RMST diff':>10}  {'SE':>8}  {'CI':>22}",
    ]
    for br in result.bandwidths:
        lines.append(
            f"{br.h:>6g}  {br.rmst_diff:>10.2f}  {br.rmst_se:>8.2f}  "
            f"({br.ci[0]:.2f}, {br.ci[1]:.2f})"
        )
        for era_name, _ in _era_iter():
            flag = br.positivity[era_name].flag_day
            if flag is not None:
                lines.append(f"        positivity: {era_name} era has no regime-followers from day {flag}")
    lines.append("")
    with open(os.path.join(config.out_dir, "summary.txt"), "w") as f:
        f.write("\n".join(lines))
    result.files.append("summary.txt")


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def run_diagnostics(config: RunConfig) -> dict[str, pd.DataFrame]:
    """Secular-trend diagnostics: monthly incident-use counts per arm and
    the per-month Kaplan–Meier 15th-percentile survival time, written as
    plot-ready CSVs."""
    config.validate()
    histories, _ = load_histories(
        config.patients, config.fills, config.events,
        horizon=config.horizon, washout_days=config.washout_days,
    )

    month_of = {}
    for h in histories:
        d = offset_date(h.u)
        month_of[h.pid] = f"{d.year:04d}-{d.month:02d}"

    months = sorted(set(month_of.values()))
    counts = []
    for m in months:
        in_month = [h for h in histories if month_of[h.pid] == m]
        counts.append({
            "month": m,
            "brand": sum(1 for h in in_month if h.arm == BRAND),
            "generic": sum(1 for h in in_month if h.arm == GENERIC),
            "total": len(in_month),
        })
    incident = pd.DataFrame(counts)

    p15_rows = []
    for m in months:
        in_month = [h for h in histories if month_of[h.pid] == m]
        curve = km_curve([(h.y, h.delta) for h in in_month], config.horizon)
        day = survival_quantile(curve, 0.15)
        p15_rows.append({
            "month": m,
            "initiators": len(in_month),
            "p15_day": np.nan if day > config.horizon else day,
        })
    p15 = pd.DataFrame(p15_rows)

    os.makedirs(config.out_dir, exist_ok=True)
    incident.to_csv(os.path.join(config.out_dir, "incident_use.csv"), index=False)
    p15.to_csv(os.path.join(config.out_dir, "monthly_p15.csv"), index=False)
    manifest = {
        "mode": "diagnose",
        "config": config.to_dict(),
        "n_patients": len(histories),
        "files": ["incident_use.csv", "monthly_p15.csv"],
    }
    with open(os.path.join(config.out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"incident_use": incident, "monthly_p15": p15}
