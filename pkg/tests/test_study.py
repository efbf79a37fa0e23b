"""Tests for the simulation study driver and its aggregated analyzer."""

import json
import os

import numpy as np
import pandas as pd
import pytest

from rdsurv.domain import BRAND, GENERIC
from rdsurv.pipeline import RunConfig
from rdsurv.rdd import CutoffDesign, split_eras
from rdsurv.rng import substream
from rdsurv.simgen import (
    exact_regime_truth,
    linear_scenario,
    null_scenario,
    simulate_dataset,
    sine_scenario,
    study_arms,
)
from rdsurv.stats import fit_glm
from rdsurv.study import (
    FROZEN_TRUTHS,
    analyze_replication,
    build_era_cells,
    run_simulation_study,
)
from rdsurv.study import _arm_curve, _hazard_design, _burden_design, _u_mode


def era_cells(scenario, n, seed, h=365.0):
    hists = simulate_dataset(scenario, n, seed)
    brand, generic, _ = split_eras(hists, CutoffDesign(scenario.u_star, h))
    return (
        {
            "brand": build_era_cells(brand, BRAND, scenario.u_star, h),
            "generic": build_era_cells(generic, GENERIC, scenario.u_star, h),
        },
        {"brand": brand, "generic": generic},
    )


def person_day_rows(hists, arm, u_star):
    """Row-per-day reconstruction, written independently of the cell builder."""
    rows = []
    for i, h in enumerate(hists):
        u_years = (h.u - u_star) / 365.25
        for t in range(1, h.y + 1):
            rows.append({
                "pid_idx": i,
                "t": t,
                "l": int(h.rxb[t - 1]),
                "z_off": int(h.z1[t - 1] != arm),
                "l_prev": int(h.rxb[t - 2]) if t >= 2 else -1,
                "z_prev": int(h.z1[t - 2] != arm) if t >= 2 else -1,
                "fail": int(h.delta and t == h.y),
                "u_years": u_years,
                "w": 1.0,
            })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# the aggregation
# ---------------------------------------------------------------------------


def test_cells_reproduce_person_day_counts():
    cells, eras = era_cells(null_scenario(), 80, 3)
    for era, arm in (("brand", BRAND), ("generic", GENERIC)):
        c = cells[era]
        raw = person_day_rows(eras[era], arm, null_scenario().u_star)

        got = c.hazard.groupby(["pid_idx", "l", "z_off", "fail"])["w"].sum()
        want = raw.groupby(["pid_idx", "l", "z_off", "fail"])["w"].sum()
        pd.testing.assert_series_equal(got.sort_index(), want.sort_index(), check_names=False)
        assert c.hazard["w"].sum() == sum(h.y for h in eras[era])
        assert c.hazard.loc[c.hazard["fail"] == 1, "w"].sum() == sum(h.delta for h in eras[era])

        raw2 = raw[raw["t"] >= 2]
        got2 = c.burden.groupby(["pid_idx", "l_prev", "z_prev", "l"])["w"].sum()
        want2 = raw2.groupby(["pid_idx", "l_prev", "z_prev", "l"])["w"].sum()
        pd.testing.assert_series_equal(got2.sort_index(), want2.sort_index(), check_names=False)

        assert np.array_equal(c.l1, [float(h.rxb[0]) for h in eras[era]])
        assert c.n == len(eras[era])


def test_cell_fit_equals_person_day_fit():
    """Weighted cells carry the same binomial likelihood as raw rows, so
    the fitted coefficients must agree to optimizer precision."""
    scen = linear_scenario()
    cells, eras = era_cells(scen, 150, 11)
    plan = study_arms()[0]  # adjusts for both
    for era, arm in (("brand", BRAND), ("generic", GENERIC)):
        c = cells[era]
        raw = person_day_rows(eras[era], arm, scen.u_star)
        cell_fit = fit_glm(
            "binomial-logit", _hazard_design(plan, "linear", c.hazard),
            c.hazard, "fail", weights=c.hazard["w"].to_numpy(),
        )
        row_fit = fit_glm(
            "binomial-logit", _hazard_design(plan, "linear", raw), raw, "fail",
        )
        np.testing.assert_allclose(cell_fit.coef, row_fit.coef, atol=1e-7)

        raw2 = raw[raw["t"] >= 2]
        cell_bd = fit_glm(
            "binomial-logit", _burden_design(plan, "linear", c.burden),
            c.burden, "l", weights=c.burden["w"].to_numpy(),
        )
        row_bd = fit_glm(
            "binomial-logit", _burden_design(plan, "linear", raw2), raw2, "l",
        )
        np.testing.assert_allclose(cell_bd.coef, row_bd.coef, atol=1e-7)


# ---------------------------------------------------------------------------
# the estimator
# ---------------------------------------------------------------------------


def test_recursion_curve_matches_monte_carlo():
    """The closed-form standardization must agree with brute-force forward
    simulation from the same fitted models."""
    scen = sine_scenario()
    cells, _ = era_cells(scen, 400, 21)
    plan = study_arms()[0]
    c = cells["brand"]
    hz = fit_glm("binomial-logit", _hazard_design(plan, "spline", c.hazard),
                 c.hazard, "fail", weights=c.hazard["w"].to_numpy())
    bd = fit_glm("binomial-logit", _burden_design(plan, "spline", c.burden),
                 c.burden, "l", weights=c.burden["w"].to_numpy())
    curve = _arm_curve(plan, hz, bd, c, None, 270)

    eval_rows = pd.DataFrame({"l": [0.0, 1.0], "z_off": 0.0, "u_years": 0.0})
    q = hz.predict_prob(eval_rows)
    p1 = bd.predict_prob(pd.DataFrame({"l_prev": [0.0, 1.0], "z_prev": 0.0, "u_years": 0.0}))
    kw = c.kernel_w / c.kernel_w.sum()
    pl1 = float(kw @ c.l1)

    M = 200_000
    rng = substream(99, 1)
    l = (rng.random(M) < pl1).astype(int)
    alive = np.ones(M, dtype=bool)
    days = np.zeros(M)
    for t in range(1, 271):
        if t >= 2:
            flip = rng.random(M) < np.where(l == 1, p1[1], p1[0])
            l = flip.astype(int)
        die = rng.random(M) < np.where(l == 1, q[1], q[0])
        alive &= ~die
        days += alive

    rmst_mc = days.mean()
    mc_se = days.std(ddof=1) / np.sqrt(M)
    rmst_closed = float(np.sum(curve.values[1:]))
    assert abs(rmst_closed - rmst_mc) < 3 * mc_se


def test_analyze_replication_deterministic():
    cells, _ = era_cells(null_scenario(), 200, 5)
    plan = study_arms()[0]
    a = analyze_replication(cells, plan, "linear", 270, 10, 42)
    b = analyze_replication(cells, plan, "linear", 270, 10, 42)
    assert a == b
    c = analyze_replication(cells, plan, "linear", 270, 10, 43)
    assert a[1] != c[1]  # a different bootstrap stream moves the SE


def test_unadjusted_arms_ignore_burden_and_date():
    """The no-adjustment plan must give the same answer no matter how the
    burden columns are scrambled."""
    cells, _ = era_cells(linear_scenario(), 200, 7)
    neither = [p for p in study_arms() if not (p.adjust_temporal or p.adjust_time_varying)][0]
    est, _, _ = analyze_replication(cells, neither, "linear", 270, 5, 1)
    for era in cells.values():
        era.hazard["u_years"] = 99.0
        era.l1[:] = 1.0
    est2, _, _ = analyze_replication(cells, neither, "linear", 270, 5, 1)
    assert est == est2


# ---------------------------------------------------------------------------
# frozen truths
# ---------------------------------------------------------------------------


def test_frozen_truths_match_recursion_oracle():
    for (name, arm), value in FROZEN_TRUTHS.items():
        scen = linear_scenario() if name == "linear" else sine_scenario()
        assert scen.name == name
        assert exact_regime_truth(scen, arm).rmst == pytest.approx(value, abs=1e-9)


def test_u_mode_choices():
    assert _u_mode(linear_scenario()) == "linear"
    assert _u_mode(sine_scenario()) == "spline"
    assert _u_mode(null_scenario()) == "linear"


# ---------------------------------------------------------------------------
# the driver
# ---------------------------------------------------------------------------


def small_config(tmp_path, **kw):
    scen_path = tmp_path / "scen.json"
    scen_path.write_text(null_scenario().to_json())
    defaults = dict(
        mode="simulate-study", scenario=str(scen_path), replications=3,
        n_patients=250, R=4, seed=99, out_dir=str(tmp_path / "out"),
    )
    defaults.update(kw)
    return RunConfig(**defaults)


def test_study_driver_outputs(tmp_path):
    cfg = small_config(tmp_path)
    report = run_simulation_study(cfg)

    assert set(report.table.columns) == {
        "scenario", "arm", "truth", "replications", "failures", "aborted",
        "bias", "rmse", "coverage", "mean_se",
    }
    assert len(report.table) == 4  # four arms, one scenario
    assert list(report.table["arm"]) == [p.name for p in study_arms()]
    assert (report.table["replications"] == 3).all()
    assert (report.table["failures"] == 0).all()
    assert not report.table["aborted"].any()
    assert report.table["coverage"].between(0, 1).all()
    assert np.isfinite(report.table["bias"]).all()
    assert (report.table["rmse"] >= report.table["bias"].abs() - 1e-12).all()

    # a trendless scenario's truth difference is exactly zero
    assert report.truths["null"] == 0.0

    out = tmp_path / "out"
    assert (out / "study_results.csv").exists()
    assert (out / "study_summary.txt").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["mode"] == "simulate-study"
    assert manifest["scenarios"] == ["null"]
    assert manifest["failures_logged"] == []
    text = (out / "study_summary.txt").read_text()
    for p in study_arms():
        assert p.name in text


def test_study_driver_deterministic(tmp_path):
    r1 = run_simulation_study(small_config(tmp_path, out_dir=str(tmp_path / "a")))
    r2 = run_simulation_study(small_config(tmp_path, out_dir=str(tmp_path / "b")))
    pd.testing.assert_frame_equal(r1.table, r2.table)
    assert (tmp_path / "a" / "study_results.csv").read_bytes() == \
        (tmp_path / "b" / "study_results.csv").read_bytes()


def test_study_driver_jobs_invariant(tmp_path):
    r1 = run_simulation_study(small_config(tmp_path, out_dir=str(tmp_path / "j1"), jobs=1))
    r2 = run_simulation_study(small_config(tmp_path, out_dir=str(tmp_path / "j2"), jobs=2))
    assert (tmp_path / "j1" / "study_results.csv").read_bytes() == \
        (tmp_path / "j2" / "study_results.csv").read_bytes()


def test_zero_replications_rejected(tmp_path):
    with pytest.raises(ValueError, match="replications"):
        small_config(tmp_path, replications=0).validate()


def test_failing_arm_is_aborted_and_logged(tmp_path, monkeypatch):
    import rdsurv.study as study_mod

    real = study_mod.analyze_replication

    def sabotage(cells, plan, u_mode, horizon, R, seed, ci_multiplier=1.96):
        if plan.name == "Both":
            raise RuntimeError("synthetic failure")
        return real(cells, plan, u_mode, horizon, R, seed, ci_multiplier)

    monkeypatch.setattr(study_mod, "analyze_replication", sabotage)
    report = run_simulation_study(small_config(tmp_path))
    row = report.table.set_index("arm").loc["Both"]
    assert bool(row["aborted"])
    assert row["failures"] >= 1
    assert np.isnan(row["bias"])
    others = report.table[report.table["arm"] != "Both"]
    assert not others["aborted"].any()
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert any("synthetic failure" in line for line in manifest["failures_logged"])
    assert "aborted" in (tmp_path / "out" / "study_summary.txt").read_text()
