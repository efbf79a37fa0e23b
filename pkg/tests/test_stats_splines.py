import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from rdsurv.stats import NaturalSplineBasis, asinh, asinh_inv, kernel_weight, ns_basis
from rdsurv.stats.kernel import KernelWeighting


class TestNaturalSplineBasis:
    def test_shape_and_rank(self):
        x = np.linspace(-3, 7, 200)
        for df in (1, 2, 3, 5):
            M, basis = ns_basis(x, df=df)
            assert M.shape == (200, df)
            assert len(basis.knots) == df + 1
            full = np.c_[np.ones(200), M]
            assert np.linalg.matrix_rank(full) == df + 1

    def test_linear_beyond_boundary_knots(self):
        rng = np.random.default_rng(5)
        inner = rng.uniform(0, 100, 500)
        _, basis = ns_basis(inner, df=4)
        lo, hi = min(basis.knots), max(basis.knots)
        for grid in (np.linspace(lo - 500, lo - 1, 50), np.linspace(hi + 1, hi + 500, 50)):
            tail = basis.transform(grid)
            second_diff = np.diff(tail, n=2, axis=0)
            assert np.max(np.abs(second_diff)) < 1e-9 * max(1.0, np.max(np.abs(tail)))

    def test_df1_is_affine_in_x(self):
        x = np.linspace(2.0, 9.0, 80)
        M, _ = ns_basis(x, df=1)
        # one basis column that is a straight line in x
        fit = np.polyfit(x, M[:, 0], 1)
        assert np.max(np.abs(np.polyval(fit, x) - M[:, 0])) < 1e-12

    def test_reproduces_natural_cubic_interpolant(self):
        # within the knot span, the natural cubic spline through any values
        # at the knots lies in the span of [1, basis]; regression residuals
        # must vanish (outside the span scipy extrapolates the boundary
        # cubic rather than the linear tail, so the comparison stops there)
        knots = np.array([0.0, 1.0, 2.5, 4.0, 6.0])
        rng = np.random.default_rng(11)
        vals = rng.normal(size=len(knots))
        ref = CubicSpline(knots, vals, bc_type="natural")
        basis = NaturalSplineBasis(knots=tuple(knots))
        xfit = np.linspace(0.0, 6.0, 300)
        M = np.c_[np.ones(len(xfit)), basis.transform(xfit)]
        coef, *_ = np.linalg.lstsq(M, ref(xfit), rcond=None)
        resid = M @ coef - ref(xfit)
        assert np.max(np.abs(resid)) < 1e-8

    def test_quantile_knots_and_roundtrip(self):
        rng = np.random.default_rng(3)
        x = rng.gamma(2.0, 10.0, size=1000)
        basis = NaturalSplineBasis.from_data(x, df=3)
        assert len(basis.knots) == 4
        restored = NaturalSplineBasis.from_dict(basis.to_dict())
        grid = np.linspace(x.min(), x.max(), 64)
        np.testing.assert_array_equal(basis.transform(grid), restored.transform(grid))

    def test_duplicate_knots_rejected(self):
        with pytest.raises(ValueError):
            NaturalSplineBasis(knots=(0.0, 1.0, 1.0, 2.0))

    def test_large_offsets_stay_conditioned(self):
        # day offsets near 13368 +- 3000 must not blow up the basis scale
        x = np.linspace(10000, 16000, 400)
        M, _ = ns_basis(x, df=5)
        assert np.max(np.abs(M)) < 50.0
        assert np.linalg.cond(np.c_[np.ones(len(x)), M]) < 1e6


class TestAsinh:
    def test_known_value(self):
        assert asinh(1.0) == pytest.approx(np.log(1 + np.sqrt(2)), abs=1e-15)
        assert asinh(1.0) == pytest.approx(0.881373587019543, abs=1e-12)

    def test_roundtrip(self):
        x = np.array([0.0, 0.01, 1.0, 42.0, 3000.0])
        np.testing.assert_allclose(asinh_inv(asinh(x)), x, rtol=1e-12)


class TestKernelWeight:
    def test_matches_standard_normal_density(self):
        from scipy.stats import norm

        u = np.array([12000.0, 13368.0, 13500.0, 15000.0])
        for h in (365.0, 730.0, 2920.0):
            np.testing.assert_allclose(
                kernel_weight(u, 13368.0, h), norm.pdf((u - 13368.0) / h), rtol=1e-12
            )

    def test_frozen_reference_values(self):
        assert kernel_weight(13368.0, 13368.0, 365.0) == pytest.approx(
            0.3989422804014327, abs=1e-15
        )
        assert kernel_weight(13003.0, 13368.0, 365.0) == pytest.approx(
            0.24197072451914337, abs=1e-15
        )

    def test_symmetry_and_monotone_decay(self):
        w = KernelWeighting(u_star=13368.0, h=365.0)
        d = np.arange(0, 2000, 25.0)
        left, right = w.weights(13368.0 - d), w.weights(13368.0 + d)
        np.testing.assert_allclose(left, right, rtol=1e-14)
        assert np.all(np.diff(right) < 0)

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            kernel_weight(0.0, 0.0, 0.0)
