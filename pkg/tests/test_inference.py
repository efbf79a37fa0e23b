import numpy as np
import pytest

from rdsurv.inference import (
    BootstrapResult,
    bootstrap,
    combine_partition_ses,
    confidence_interval,
    partition_patients,
)
from rdsurv.km import SurvivalCurve
from rdsurv.rng import STAGE_BOOTSTRAP, substream


def exp_curve(rate, horizon=20):
    t = np.arange(horizon + 1)
    return SurvivalCurve(values=np.exp(-rate * t), horizon=horizon)


def mean_analyzer(x, horizon=20):
    """Analysis whose 'curve' decays at the resample-weighted mean of x."""

    def analyze(mult, r):
        m = float(np.sum(mult["g"] * x) / np.sum(mult["g"]))
        return {"g": exp_curve(m / 50.0, horizon)}, 100.0 * m

    return analyze


class TestCombinePartitionSes:
    def test_three_four_five(self):
        assert combine_partition_ses([3.0, 4.0, 5.0]) == pytest.approx(np.sqrt(50.0) / 3.0, abs=1e-12)
        assert combine_partition_ses([3.0, 4.0, 5.0]) == pytest.approx(2.357022603955158, abs=1e-12)

    def test_equal_ses(self):
        assert combine_partition_ses([2.5, 2.5, 2.5]) == pytest.approx(2.5 / np.sqrt(3.0), abs=1e-12)

    def test_single_partition_identity(self):
        assert combine_partition_ses([7.3]) == pytest.approx(7.3, abs=1e-12)

    def test_permutation_invariant_and_homogeneous(self):
        rng = np.random.default_rng(4)
        ses = rng.uniform(0.1, 5.0, 6)
        base = combine_partition_ses(ses)
        assert combine_partition_ses(ses[::-1]) == pytest.approx(base, abs=1e-12)
        assert combine_partition_ses(3.7 * ses) == pytest.approx(3.7 * base, rel=1e-12)

    def test_rejects_empty_and_negative(self):
        with pytest.raises(ValueError):
            combine_partition_ses([])
        with pytest.raises(ValueError):
            combine_partition_ses([1.0, -0.5])


class TestConfidenceInterval:
    def test_published_interval(self):
        lo, hi = confidence_interval(10.54, 9.58, 2.0)
        assert lo == pytest.approx(-8.62, abs=1e-12)
        assert hi == pytest.approx(29.70, abs=1e-12)

    def test_standard_multiplier(self):
        lo, hi = confidence_interval(10.54, 9.58, 1.96)
        assert lo == pytest.approx(10.54 - 1.96 * 9.58, abs=1e-12)
        assert hi == pytest.approx(10.54 + 1.96 * 9.58, abs=1e-12)

    def test_zero_se_collapses(self):
        assert confidence_interval(5.0, 0.0) == (5.0, 5.0)

    def test_width_linear_in_multiplier_and_se(self):
        w = lambda m, s: np.diff(confidence_interval(0.0, s, m))[0]
        assert w(2.0, 3.0) == pytest.approx(2.0 * w(1.0, 3.0), rel=1e-12)
        assert w(2.0, 3.0) == pytest.approx(3.0 * w(2.0, 1.0), rel=1e-12)

    def test_rejects_negative_se(self):
        with pytest.raises(ValueError):
            confidence_interval(1.0, -1.0)


class TestBootstrap:
    def test_constant_analysis_gives_zero_ses(self):
        analyze = lambda mult, r: ({"g": exp_curve(0.02)}, 1.5)
        res = bootstrap({"g": 10}, analyze, R=20, seed=3)
        assert res.completed == 20 and res.dropped == 0
        # identical resamples: SEs are zero (up to summation rounding)
        np.testing.assert_allclose(res.se_log["g"], np.zeros(21), atol=1e-14)
        assert res.rmst_diff_se == pytest.approx(0.0, abs=1e-14)

    def test_matches_independent_replay(self):
        n, R, seed = 40, 60, 17
        rng = np.random.default_rng(5)
        x = rng.uniform(0.2, 0.8, n)
        res = bootstrap({"g": n}, mean_analyzer(x), R=R, seed=seed)

        means = []
        for r in range(R):
            sub = substream(seed, STAGE_BOOTSTRAP, r)
            mult = sub.multinomial(n, np.full(n, 1.0 / n)).astype(float)
            assert mult.sum() == n
            means.append(float(np.sum(mult * x) / n))
        means = np.asarray(means)

        t = np.arange(21)
        np.testing.assert_allclose(res.se_log["g"], np.std(means, ddof=1) * t / 50.0, atol=1e-12)
        assert res.rmst_diff_se == pytest.approx(100.0 * np.std(means, ddof=1), rel=1e-12)
        np.testing.assert_allclose(res.rmst_diffs, 100.0 * means, rtol=1e-15)

    def test_seed_determinism(self):
        x = np.linspace(0.1, 0.9, 25)
        a = bootstrap({"g": 25}, mean_analyzer(x), R=30, seed=8)
        b = bootstrap({"g": 25}, mean_analyzer(x), R=30, seed=8)
        np.testing.assert_array_equal(a.se_log["g"], b.se_log["g"])
        assert a.rmst_diff_se == b.rmst_diff_se
        c = bootstrap({"g": 25}, mean_analyzer(x), R=30, seed=9)
        assert not np.array_equal(a.se_log["g"], c.se_log["g"])

    def test_two_groups_resampled_independently(self):
        def analyze(mult, r):
            assert set(mult) == {"brand", "generic"}
            assert mult["brand"].sum() == 12 and mult["generic"].sum() == 30
            m = float(mult["brand"] @ np.arange(12)) / 12.0
            return {"b": exp_curve(0.01), "g": exp_curve(0.02)}, m

        res = bootstrap({"brand": 12, "generic": 30}, analyze, R=10, seed=1)
        assert set(res.se_log) == {"b", "g"}
        assert res.rmst_diff_se > 0

    def test_failed_resamples_dropped_with_warning(self):
        n, R, seed = 15, 20, 0
        fail_for = set()
        for r in range(R):
            sub = substream(seed, STAGE_BOOTSTRAP, r)
            mult = sub.multinomial(n, np.full(n, 1.0 / n))
            if mult[0] >= 3:
                fail_for.add(r)
        assert 1 <= len(fail_for) <= 0.2 * R, "fixture seed must give a small failure count"

        def analyze(mult, r):
            if mult["g"][0] >= 3:
                raise RuntimeError("refit failed")
            return {"g": exp_curve(0.02)}, float(mult["g"][1])

        with pytest.warns(UserWarning, match="dropped"):
            res = bootstrap({"g": n}, analyze, R=R, seed=seed)
        assert res.dropped == len(fail_for)
        assert res.completed == R - len(fail_for)
        assert len(res.rmst_diffs) == res.completed

    def test_too_many_failures_is_an_error(self):
        def analyze(mult, r):
            raise RuntimeError("always broken")

        with pytest.raises(RuntimeError, match="unstable"), pytest.warns(UserWarning):
            bootstrap({"g": 10}, analyze, R=10, seed=0)

    def test_zero_survival_gives_non_finite_se(self):
        def analyze(mult, r):
            v = np.array([1.0, 0.5 * mult["g"][0] / 4.0 + 0.25, 0.0])
            return {"g": SurvivalCurve(values=v, horizon=2)}, 0.0

        res = bootstrap({"g": 8}, analyze, R=15, seed=4)
        assert np.isfinite(res.se_log["g"][1])
        assert not np.isfinite(res.se_log["g"][2])

    def test_rejects_tiny_r_and_empty_groups(self):
        analyze = lambda mult, r: ({"g": exp_curve(0.02)}, 0.0)
        with pytest.raises(ValueError):
            bootstrap({"g": 10}, analyze, R=1, seed=0)
        with pytest.raises(ValueError):
            bootstrap({"g": 0}, analyze, R=5, seed=0)

    def test_result_validation(self):
        with pytest.raises(ValueError):
            BootstrapResult(requested=1, completed=1, dropped=0, se_log={}, rmst_diff_se=0.0)
        with pytest.raises(ValueError):
            BootstrapResult(
                requested=5, completed=5, dropped=0,
                se_log={"g": np.array([-1.0])}, rmst_diff_se=0.0,
            )


class TestPartitionPatients:
    def test_partition_properties(self):
        parts = partition_patients(100, 3, seed=7)
        assert len(parts) == 3
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 100
        combined = np.concatenate(parts)
        assert np.array_equal(np.sort(combined), np.arange(100))

    def test_deterministic(self):
        a = partition_patients(50, 4, seed=1)
        b = partition_patients(50, 4, seed=1)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa, pb)
        c = partition_patients(50, 4, seed=2)
        assert any(not np.array_equal(pa, pc) for pa, pc in zip(a, c))

    def test_edge_cases(self):
        assert np.array_equal(partition_patients(10, 1, seed=0)[0], np.arange(10))
        singles = partition_patients(5, 5, seed=0)
        assert all(len(p) == 1 for p in singles)
        with pytest.raises(ValueError):
            partition_patients(3, 4, seed=0)
        with pytest.raises(ValueError):
            partition_patients(3, 0, seed=0)
