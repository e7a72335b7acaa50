import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discount_kernel.curve_fit import (
    HARD,
    CashflowSystem,
    FitConfig,
    FittedCurve,
    IllPosedFitError,
    NegativeDiscountError,
    add_terminal_constraint,
    contract_yields,
    cross_validate,
    curve_derivative_at_zero,
    cv_score,
    evaluate_curve,
    fit_curve,
    model_prices,
    rmse_yield,
    rmse_yield_report,
    sensitivity_grid,
    theta_check,
    yield_from_price,
)
from discount_kernel.kernels import KernelSpec, eval_kernel, gram_matrix

from oracles import normal_equations_minimizer, random_contracts

REF = KernelSpec(0.2, 0.04)
REF_CFG = FitConfig(REF, ridge=1e-3, terminal_weight=None)


def random_system(rng, M=None, N=None, x_max=30.0, hard=0):
    M = M or int(rng.integers(1, 9))
    N = N or int(rng.integers(M, 13))
    x = np.sort(rng.choice(np.arange(1, 360), N, replace=False)) / 360 * x_max
    C = rng.uniform(0, 5, (M, N)) * (rng.uniform(size=(M, N)) < 0.6)
    C[np.arange(M), rng.integers(0, N, M)] += 100.0
    P = rng.uniform(50, 100, M)
    w = rng.uniform(0.5, 2.0, M)
    w[:hard] = np.inf
    return CashflowSystem(P, C, x, w)


class TestCashflowSystem:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            CashflowSystem([1.0, 2.0], [[1.0, 0.0]], [1.0, 2.0])

    def test_tenors_increasing(self):
        with pytest.raises(ValueError):
            CashflowSystem([1.0], [[1.0, 1.0]], [2.0, 1.0])

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError):
            CashflowSystem([1.0, 1.0], [[1.0, 0.0], [0.0, 0.0]], [1.0, 2.0])

    def test_weights_positive(self):
        with pytest.raises(ValueError):
            CashflowSystem([1.0], [[1.0]], [1.0], [0.0])

    def test_immutable(self):
        s = CashflowSystem([1.0], [[1.0]], [1.0])
        with pytest.raises(ValueError):
            s.prices[0] = 2.0

    def test_round_trip_with_hard_weight(self):
        s = CashflowSystem([1.0, 0.9], [[1.0, 0.0], [0.1, 1.0]], [0.0, 2.0], [HARD, 1.0], "2021-01-04")
        t = CashflowSystem.from_dict(s.to_dict())
        np.testing.assert_array_equal(t.obs_weights, s.obs_weights)
        assert t.date == s.date


class TestFitCurve:
    def test_single_contract_soft(self):
        x, p, w, lam = 3.0, 0.9, 2.0, 0.5
        s = CashflowSystem([p], [[1.0]], [x], [w])
        c = fit_curve(s, FitConfig(REF, ridge=lam, terminal_weight=None))
        kxx = eval_kernel(REF, x, x)
        assert c.coef[0] == pytest.approx(p / (kxx + lam / w), rel=1e-14)
        assert c(x) == pytest.approx(p * kxx / (kxx + lam / w), rel=1e-14)

    def test_single_contract_hard_interpolates(self):
        s = CashflowSystem([0.9], [[1.0]], [3.0], [HARD])
        assert fit_curve(s, REF_CFG)(3.0) == pytest.approx(0.9, rel=1e-14)

    def test_random_instances_match_normal_equations(self):
        rng = np.random.default_rng(0)
        for _ in range(15):
            s = random_contracts(rng)
            got = fit_curve(s, REF_CFG).coef
            want = normal_equations_minimizer(s, REF, 1e-3)
            np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-8 * np.abs(want).max())

    def test_per_hundred_face_short_grid(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            s = random_contracts(rng, face=100.0)
            got = fit_curve(s, REF_CFG).coef
            want = normal_equations_minimizer(s, REF, 1e-3)
            np.testing.assert_allclose(got, want, rtol=1e-7, atol=1e-7 * np.abs(want).max())

    def test_hard_rows_repriced_exactly(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            s = random_contracts(rng, hard=2, M=int(rng.integers(2, 9)))
            c = fit_curve(s, REF_CFG)
            resid = s.prices - model_prices(s, c)
            assert np.all(np.abs(resid[:2]) <= 1e-10 * np.abs(s.prices[:2]))

    def test_ridge_limit(self):
        # as ridge grows the coefficients approach C'WP / ridge
        s = random_contracts(np.random.default_rng(2), M=5, N=8)
        ridge = 1e12
        c = fit_curve(s, FitConfig(REF, ridge, None))
        want = s.cashflows.T @ (s.obs_weights * s.prices)
        np.testing.assert_allclose(c.coef * ridge, want, rtol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100.0))
    def test_reweighting_invariance(self, c):
        s = random_system(np.random.default_rng(7), M=5, N=9)
        s2 = CashflowSystem(s.prices, s.cashflows, s.tenors, s.obs_weights * c)
        a = fit_curve(s, FitConfig(REF, 1e-3))
        b = fit_curve(s2, FitConfig(REF, 1e-3 * c))
        np.testing.assert_allclose(a.coef, b.coef, rtol=1e-12, atol=1e-14)

    def test_representer_form(self):
        s = random_system(np.random.default_rng(8), M=4, N=7)
        c = fit_curve(s, REF_CFG)
        x = np.linspace(0, 40, 9)
        want = np.array([sum(cj * eval_kernel(REF, xi, xj) for cj, xj in zip(c.coef, c.tenors)) for xi in x])
        np.testing.assert_allclose(c(x), want, rtol=1e-12)

    def test_smoothed_prices_at_knots(self):
        s = random_system(np.random.default_rng(9), M=5, N=9)
        c = fit_curve(s, REF_CFG)
        K = gram_matrix(REF, s.tenors)
        A = s.cashflows @ K @ s.cashflows.T
        Lam = np.diag(1e-3 / s.obs_weights)
        smoothed = A @ np.linalg.solve(A + Lam, s.prices)
        np.testing.assert_allclose(s.cashflows @ c(s.tenors), smoothed, rtol=1e-9)

    def test_empty_system_rejected(self):
        empty = CashflowSystem(np.zeros(0), np.zeros((0, 1)), [1.0])
        with pytest.raises(ValueError):
            fit_curve(empty, REF_CFG)

    def test_singular_hard_block_reported(self):
        s = CashflowSystem([0.9, 0.8], [[1.0, 0.0], [1.0, 0.0]], [1.0, 2.0], [HARD, HARD])
        with pytest.raises(IllPosedFitError) as info:
            fit_curve(s, REF_CFG)
        assert info.value.condition_number > 1e10

    def test_bad_ridge(self):
        with pytest.raises(ValueError):
            FitConfig(REF, ridge=0.0)


class TestTerminalConstraint:
    def test_empty_system(self):
        empty = CashflowSystem(np.zeros(0), np.zeros((0, 0)), np.zeros(0))
        t = add_terminal_constraint(empty)
        assert t.n_contracts == 1 and t.tenors.tolist() == [0.0] and t.prices.tolist() == [1.0]

    def test_existing_zero_tenor_reused(self):
        s = CashflowSystem([0.5], [[0.0, 1.0]], [0.0, 1.0])
        t = add_terminal_constraint(s, 3.0)
        assert t.tenors.tolist() == [0.0, 1.0]
        assert t.cashflows[-1].tolist() == [1.0, 0.0] and t.obs_weights[-1] == 3.0

    def test_hard_terminal_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            s = random_system(rng)
            c = fit_curve(s, FitConfig(REF, 1e-3, HARD))
            assert abs(c(0.0) - 1.0) <= 1e-10

    def test_soft_terminal_default(self):
        s = random_system(np.random.default_rng(6), M=6, N=10)
        c = fit_curve(s, FitConfig(REF, 1e-3))
        assert c.tenors[0] == 0.0 and abs(c(0.0) - 1.0) < 1e-3


class TestEvaluation:
    def test_zero_coefficients(self):
        assert evaluate_curve(FittedCurve(REF, [1.0, 2.0], [0.0, 0.0]), 3.0) == 0.0

    def test_single_section(self):
        c = FittedCurve(REF, [4.0], [1.0])
        assert c(2.5) == eval_kernel(REF, 2.5, 4.0)

    def test_short_rate_of_exponential(self):
        # represent e^{-r x} exactly: one section of the alpha=r, beta-tiny kernel at tenor 0
        r = 0.03
        kern = KernelSpec(r, 1.0)
        c = FittedCurve(kern, [0.0], [1.0])
        assert curve_derivative_at_zero(c) == pytest.approx(r, rel=1e-14)
        fd = (c(0.0) - c(1e-6)) / 1e-6
        assert curve_derivative_at_zero(c) == pytest.approx(fd, rel=1e-5)

    def test_flat_curve_zero_rate(self):
        kern = KernelSpec(0.2, 0.04)
        c = FittedCurve(kern, [5.0], [1.0])  # beta*y - alpha = 0
        assert curve_derivative_at_zero(c) == pytest.approx(0.0, abs=1e-15)

    def test_short_rate_fitted_curve(self):
        s = random_system(np.random.default_rng(12), M=6, N=10)
        c = fit_curve(s, FitConfig(REF, 1e-3))
        eps = 1e-6
        fd = -(c(eps) - c(0.0)) / eps
        assert curve_derivative_at_zero(c) == pytest.approx(fd, abs=1e-6 * max(1.0, abs(fd)))

    def test_json_round_trip_bitwise(self):
        s = random_system(np.random.default_rng(13))
        c = fit_curve(s, FitConfig(REF, 1e-3))
        d = FittedCurve.from_dict(c.to_dict())
        x = np.linspace(0, 30, 61)
        assert np.array_equal(c(x), d(x))


class TestYields:
    def test_unit_price(self):
        assert yield_from_price(1.0, 7.0) == 0.0

    def test_inverse(self):
        assert yield_from_price(math.exp(-0.05 * 2), 2.0) == pytest.approx(0.05, rel=1e-14)

    def test_half(self):
        assert yield_from_price(0.5, 10.0) == pytest.approx(math.log(2) / 10, rel=1e-15)

    def test_negative_discount(self):
        with pytest.raises(NegativeDiscountError, match="negative discount"):
            yield_from_price(-0.1, 1.0)

    def test_rmse_zero_when_exact(self):
        s = CashflowSystem([95.0, 90.0], [[100.0, 0.0], [2.0, 102.0]], [1.0, 2.0])
        assert rmse_yield(s, lambda x: np.array([0.95, (90.0 - 1.9) / 102.0])) == pytest.approx(0.0, abs=1e-15)

    def test_rmse_single_contract_ten_bp(self):
        tau, y = 2.0, 0.04
        s = CashflowSystem([100 * math.exp(-y * tau)], [[100.0]], [tau])
        curve = lambda x: np.exp(-(y + 0.001) * np.asarray(x))
        assert rmse_yield(s, curve) == pytest.approx(0.0010, rel=1e-10)

    def test_report(self):
        s = CashflowSystem([95.0], [[100.0]], [1.0], date="d1")
        rep = rmse_yield_report([s, s], [lambda x: np.full_like(x, 0.95), lambda x: np.full_like(x, 0.95)])
        assert rep.rows() == [("d1", 0.0, 1), ("d1", 0.0, 1)] and rep.average == 0.0
        with pytest.raises(ValueError):
            rmse_yield_report([s], [])

    def test_contract_yield_notional_normalized(self):
        s = CashflowSystem([50.0], [[0.0, 100.0]], [1.0, 3.0])
        assert contract_yields(s, s.prices)[0] == pytest.approx(math.log(2) / 3)


class TestTheta:
    def test_reference_parameters_outside(self):
        assert theta_check(0.2, 0.04, [0.5, 30.0]) is False

    def test_inside(self):
        assert theta_check(31.0, 1.0, [1.0, 30.0]) is True

    def test_decay_inside_theta(self):
        rng = np.random.default_rng(21)
        kern = KernelSpec(1.0, 0.03)  # alpha/beta = 33 > 30
        for _ in range(10):
            s = random_system(rng, M=5, N=10)
            c = fit_curve(s, FitConfig(kern, 1e-3))
            assert theta_check(1.0, 0.03, s.tenors)
            assert abs(c(100 * s.tenors.max())) < abs(c(s.tenors.max()))


def synthetic_days(kernel_truth=None, n_days=3, noise=0.0, seed=0):
    """Coupon-like contracts priced off a sum of exponentials."""
    rng = np.random.default_rng(seed)
    rates = np.array([-0.02, -0.05, -0.15])
    z = np.array([0.5, 0.3, 0.2])
    truth = lambda x: np.exp(np.multiply.outer(np.asarray(x), rates)) @ z
    days = []
    for _ in range(n_days):
        mats = np.sort(rng.choice(np.arange(1, 61), 25, replace=False)) / 2.0
        grid = np.arange(1, 61) / 2.0
        C = np.zeros((mats.size, grid.size))
        for i, m in enumerate(mats):
            cpn = rng.uniform(0, 3)
            k = int(m * 2)
            C[i, :k] = cpn
            C[i, k - 1] += 100.0
        P = C @ truth(grid) + rng.normal(0, noise, mats.size)
        days.append(CashflowSystem(P, C, grid))
    return days, truth


class TestCrossValidation:
    def test_singleton_grid_returns_triple(self):
        days, _ = synthetic_days()
        res = cross_validate(days, {"alpha": [0.2], "beta": [0.04], "ridge": [0.001]}, folds=5)
        assert res.best == (0.2, 0.04, 0.001)
        assert len(res.table) == 1

    def test_selects_well_scaled_kernel(self):
        days, _ = synthetic_days(noise=0.01)
        res = cross_validate(days, {"alpha": [0.2], "beta": [0.01, 5.0], "ridge": [1e-3]}, folds=5)
        assert res.best[1] == 0.01

    def test_leave_one_out_definition(self):
        days, _ = synthetic_days(n_days=1, noise=0.05)
        s = days[0]
        cfg = FitConfig(REF, 1e-2)
        sq = []
        for i in range(s.n_contracts):
            keep = np.setdiff1d(np.arange(s.n_contracts), [i])
            c = fit_curve(s.subset(keep), cfg)
            sq.append((s.prices[i] - model_prices(s.subset([i]), c)[0]) ** 2)
        assert cv_score(days, cfg, folds=s.n_contracts) == pytest.approx(np.mean(sq), rel=1e-12)

    def test_ties_go_to_larger_ridge(self, monkeypatch):
        import discount_kernel.curve_fit as cf
        monkeypatch.setattr(cf, "cv_score", lambda *a, **k: 1.0)
        res = cf.cross_validate([], {"alpha": [0.2], "beta": [0.04], "ridge": [1e-3, 1e-1, 1e-2]})
        assert res.best == (0.2, 0.04, 0.1)

    def test_folds_and_grid_validation(self):
        days, _ = synthetic_days(n_days=1)
        with pytest.raises(ValueError):
            cross_validate(days, {"alpha": [0.2], "beta": [0.04], "ridge": [1e-3]}, folds=1)
        with pytest.raises(ValueError):
            cross_validate(days, {"alpha": [0.2], "beta": [-1.0], "ridge": [1e-3]})
        with pytest.raises(ValueError):
            cross_validate(days, {"alpha": [0.2], "beta": [0.04], "ridge": [0.0]})


@pytest.fixture(scope="module")
def slices():
    days, _ = synthetic_days(n_days=2, noise=0.02, seed=3)
    return sensitivity_grid({"alpha": 0.2, "beta": 0.01, "ridge": 1e-3}, days, steps=3), days


class TestSensitivity:

    def test_three_slices_with_unit_cell(self, slices):
        sl, days = slices
        assert [s.fixed for s in sl] == ["alpha", "beta", "ridge"]
        base = np.mean([rmse_yield(d, fit_curve(d, FitConfig(KernelSpec(0.2, 0.01), 1e-3))) for d in days])
        for s in sl:
            i = int(np.argmin(np.abs(s.values_a / {"alpha": 0.2, "beta": 0.01, "ridge": 1e-3}[s.param_a] - 1)))
            j = int(np.argmin(np.abs(s.values_b / {"alpha": 0.2, "beta": 0.01, "ridge": 1e-3}[s.param_b] - 1)))
            assert s.rmse[i, j] == pytest.approx(base, rel=1e-12)

    def test_norm_nonincreasing_in_ridge(self):
        days, _ = synthetic_days(n_days=1, noise=0.02, seed=4)
        norms = [fit_curve(days[0], FitConfig(KernelSpec(0.2, 0.01), r)).rkhs_norm() for r in np.geomspace(1e-4, 10, 8)]
        assert all(b <= a * (1 + 1e-9) for a, b in zip(norms, norms[1:]))

    def test_steps_validation(self):
        with pytest.raises(ValueError):
            sensitivity_grid({"alpha": 0.2, "beta": 0.04, "ridge": 1e-3}, [], steps=1)

    def test_rows_shape(self, slices):
        sl, _ = slices
        assert len(list(sl[0].rows())) == sl[0].values_a.size * sl[0].values_b.size
