import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discount_kernel.curve_fit import CashflowSystem, FitConfig, FittedCurve, fit_curve
from discount_kernel.kernels import KernelSpec, eval_kernel, gram_matrix, rkhs_inner_product_exp
from discount_kernel.reduce import (
    OptimizerConfig,
    ReducedModel,
    SingularBasisError,
    basis_gram,
    canonical_order,
    cross_gram,
    naive_fit,
    optimize_rates,
    reduce_day,
    reduced_price,
    reduction_loss,
    sweep_dimensions,
)

REF = KernelSpec(0.2, 0.04)
RATES = np.array([-0.02, -0.05, -0.15])


def exact_curve(kernel, rates, Z):
    """Full-fit object equal to sum_i Z_i exp(rates_i x) via kernel sections.

    ``exp(lam x) = exp(alpha y) k(x, y)`` with ``y = (lam + alpha) / beta``.
    """
    rates = np.asarray(rates, dtype=float)
    y = (rates + kernel.alpha) / kernel.beta
    order = np.argsort(y)
    return FittedCurve(kernel, y[order], (np.exp(kernel.alpha * y) * np.asarray(Z))[order])


def three_factor_days(n_days=6, seed=0, kernel=REF):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(0.1, 1.0, (n_days, 3))
    Z /= Z.sum(axis=1, keepdims=True)
    return [exact_curve(kernel, RATES, z) for z in Z], Z


class TestBasisGram:
    def test_single_rate(self):
        lam = 0.7
        G = basis_gram([lam], KernelSpec(0.0, 1.0))
        assert G[0, 0] == pytest.approx(math.exp(lam**2), rel=1e-15)

    def test_two_rates_closed_form(self):
        G = basis_gram([0.0, 1.0], KernelSpec(0.0, 1.0))
        np.testing.assert_allclose(G, [[1, 1], [1, math.e]], rtol=1e-15)
        assert np.linalg.det(G) == pytest.approx(math.e - 1)

    def test_reference_kernel_spd(self):
        G = basis_gram([-0.05, -0.10, -0.20], REF)
        np.testing.assert_array_equal(G, G.T)
        assert np.linalg.eigvalsh(G).min() > 0

    def test_matches_inner_product(self):
        r = [-0.05, -0.1, 0.02]
        G = basis_gram(r, REF)
        want = [[rkhs_inner_product_exp(REF, a, b) for b in r] for a in r]
        np.testing.assert_allclose(G, want, rtol=1e-14)

    def test_duplicate_rates_rejected(self):
        with pytest.raises(SingularBasisError):
            basis_gram([-0.1, -0.1], REF)

    def test_polynomial_kernel_rejected(self):
        with pytest.raises(ValueError):
            basis_gram([-0.1], KernelSpec(0.2, 0.04, (1.0, 1.0)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-500, 50), min_size=2, max_size=5, unique=True))
    def test_spd_random_rates(self, ints):
        # integer grid in thousandths gives a pairwise gap of at least 1e-3
        G = basis_gram(np.array(ints) / 1000.0, KernelSpec(0.5, 1.0))
        assert np.linalg.eigvalsh(G).min() > 0


class TestCrossGram:
    def test_zero_tenor_row(self):
        np.testing.assert_array_equal(cross_gram([0.0], [-0.1, 0.3, 2.0]), [[1.0, 1.0, 1.0]])

    def test_single_entry(self):
        assert cross_gram([2.0], [-0.3])[0, 0] == pytest.approx(math.exp(-0.6), rel=1e-15)

    def test_reproducing_identity(self):
        x = np.array([0.5, 3.0, 12.0])
        r = np.array([-0.1, -0.03])
        Kp = cross_gram(x, r)
        for i, xi in enumerate(x):
            for j, lam in enumerate(r):
                want = rkhs_inner_product_exp(REF, REF.beta * xi - REF.alpha, lam) * math.exp(-REF.alpha * xi)
                assert Kp[i, j] == pytest.approx(want, rel=1e-10)


class TestReduceDay:
    def test_basis_element(self):
        full = exact_curve(REF, [-0.05], [1.0])
        Z = reduce_day(full, [-0.05])
        np.testing.assert_allclose(Z, [1.0], rtol=1e-12)
        assert abs(reduction_loss(full, [-0.05], Z)) <= 1e-10

    def test_two_term_combination(self):
        full = exact_curve(REF, [-0.05, -0.12], [2.0, 3.0])
        Z = reduce_day(full, [-0.05, -0.12])
        np.testing.assert_allclose(Z, [2.0, 3.0], rtol=1e-9)
        assert abs(reduction_loss(full, [-0.05, -0.12], Z)) <= 1e-10

    def test_two_term_from_interpolating_fit(self):
        # reproduce the target by hard-constraint interpolation on a tenor grid first
        x = np.linspace(0.0, 10.0, 11)
        target = 2 * np.exp(-0.05 * x) + 3 * np.exp(-0.12 * x)
        kern = KernelSpec(0.2, 0.04)
        s = CashflowSystem(target, np.eye(x.size), x, np.full(x.size, np.inf))
        full = fit_curve(s, FitConfig(kern, 1e-3, None))
        Z = reduce_day(full, [-0.05, -0.12])
        loss = reduction_loss(full, [-0.05, -0.12], Z)
        assert loss >= -1e-12
        np.testing.assert_allclose(full(x), target, rtol=1e-9)

    def test_orthogonality(self):
        rng = np.random.default_rng(3)
        full = FittedCurve(REF, np.sort(rng.uniform(0, 15, 8)), rng.normal(size=8))
        r = np.array([-0.02, -0.07, -0.2])
        Z = reduce_day(full, r)
        resid = cross_gram(full.tenors, r).T @ full.coef - basis_gram(r, REF) @ Z
        assert np.abs(resid).max() <= 1e-9 * max(1.0, np.abs(cross_gram(full.tenors, r).T @ full.coef).max())

    def test_ill_conditioned_basis_reports(self):
        full = exact_curve(REF, [-0.05], [1.0])
        with pytest.raises(SingularBasisError, match="cond"):
            reduce_day(full, [-0.05, -0.05 + 1e-7])

    def test_kernel_section_rates_give_zero_loss(self):
        full = FittedCurve(REF, [1.0, 4.0, 9.0], [0.3, -0.2, 0.5])
        r = REF.beta * full.tenors - REF.alpha
        Z = reduce_day(full, r)
        assert abs(reduction_loss(full, r, Z)) <= 1e-10


class TestReductionLoss:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.full = FittedCurve(REF, np.sort(rng.uniform(0, 12, 6)), rng.normal(size=6))
        self.r = np.array([-0.03, -0.1])
        self.Z = reduce_day(self.full, self.r)

    def test_projection_identity(self):
        c = self.full.coef
        norm2 = c @ gram_matrix(REF, self.full.tenors) @ c
        want = norm2 - self.Z @ basis_gram(self.r, REF) @ self.Z
        got = reduction_loss(self.full, self.r, self.Z)
        assert got >= 0
        assert got == pytest.approx(want, rel=1e-8, abs=1e-12 * norm2)

    def test_zero_coefficients(self):
        c = self.full.coef
        assert reduction_loss(self.full, self.r, [0.0, 0.0]) == pytest.approx(c @ gram_matrix(REF, self.full.tenors) @ c, rel=1e-14)

    def test_convex_in_z(self):
        base = reduction_loss(self.full, self.r, self.Z)
        rng = np.random.default_rng(0)
        for _ in range(20):
            dz = rng.normal(size=2) * 1e-2
            assert reduction_loss(self.full, self.r, self.Z + dz) > base


class TestReducedPrice:
    def test_one_hot_at_zero(self):
        m = ReducedModel([-0.01, -0.1, -0.3], [[1.0, 0.0, 0.0]], REF)
        assert reduced_price(m, 0, 0.0) == 1.0

    def test_constant_short_rate(self):
        m = ReducedModel([-0.03], [[1.0]], REF)
        x = np.linspace(0, 30, 7)
        np.testing.assert_allclose(reduced_price(m, 0, x), np.exp(-0.03 * x), rtol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(range(4)))
    def test_permutation_invariance(self, perm):
        r = np.array([-0.01, -0.05, -0.2, -0.4])
        Z = np.array([[0.5, 0.25, 0.125, 0.125]])
        a = ReducedModel(r, Z, REF)
        b = ReducedModel(r[list(perm)], Z[:, list(perm)], REF)
        x = np.array([0.0, 1.0, 7.5, 30.0])
        np.testing.assert_allclose(reduced_price(a, 0, x), reduced_price(b, 0, x), rtol=1e-15)

    def test_pointwise_bound(self):
        rng = np.random.default_rng(5)
        full = FittedCurve(REF, np.sort(rng.uniform(0, 20, 10)), rng.normal(size=10) * 0.1)
        r = np.array([-0.02, -0.08, -0.2])
        Z = reduce_day(full, r)
        loss = reduction_loss(full, r, Z)
        m = ReducedModel(r, [Z], REF)
        x = np.linspace(0, 30, 301)
        gap = np.abs(full(x) - reduced_price(m, 0, x))
        bound = math.sqrt(max(loss, 0.0)) * np.sqrt(eval_kernel(REF, x, x))
        assert np.all(gap <= bound * (1 + 1e-8) + 1e-12)

    def test_canonical_order_and_round_trip(self):
        r, Z = canonical_order([-0.2, 0.01, -0.05], [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(r, [0.01, -0.05, -0.2])
        np.testing.assert_array_equal(Z, [[2.0, 3.0, 1.0]])
        m = ReducedModel(r, Z, REF, loss=0.5, dates=["2021-01-04"])
        back = ReducedModel.from_dict(m.to_dict())
        np.testing.assert_array_equal(back.rates, m.rates)
        assert back.kernel == REF and back.dates == m.dates and back.d == 2


class TestOptimizeRates:
    def test_recovers_rates_from_near_init(self):
        fits, Z = three_factor_days()
        init = RATES * (1 + np.array([0.02, -0.03, 0.01]))
        model, rep = optimize_rates(fits, 2, OptimizerConfig(n_starts=1), init=init)
        np.testing.assert_allclose(model.rates, RATES, atol=1e-6)
        assert rep.total <= 1e-8
        np.testing.assert_allclose(model.daily_coefs, Z, atol=1e-5)

    def test_inner_coefficients_satisfy_normal_equations(self):
        fits, _ = three_factor_days(n_days=3, seed=1)
        model, _ = optimize_rates(fits, 1, OptimizerConfig(n_starts=2))
        G = basis_gram(model.rates, REF)
        for f, z in zip(fits, model.daily_coefs):
            rhs = cross_gram(f.tenors, model.rates).T @ f.coef
            assert np.abs(rhs - G @ z).max() <= 1e-9 * max(1.0, np.abs(rhs).max())

    def test_nested_losses(self):
        fits, _ = three_factor_days(n_days=4, seed=2)
        out = sweep_dimensions(fits, [0, 1, 2], OptimizerConfig(n_starts=3))
        totals = [out[d][1].total for d in (0, 1, 2)]
        assert totals[0] >= totals[1] >= totals[2]
        assert totals[0] > 0 and totals[1] > totals[2]
        assert all(np.all(out[d][1].per_day >= 0) for d in out)

    def test_rates_sorted_decreasing(self):
        fits, _ = three_factor_days(n_days=2)
        model, rep = optimize_rates(fits, 2, OptimizerConfig(n_starts=2))
        assert np.all(np.diff(model.rates) < 0)
        assert len(rep.trace) == 2

    def test_validation(self):
        with pytest.raises(ValueError):
            optimize_rates([], 1)
        fits, _ = three_factor_days(n_days=1)
        with pytest.raises(ValueError):
            optimize_rates(fits, 64)
        with pytest.raises(ValueError):
            optimize_rates(fits, 1, init=[-0.1])


def exponential_market(rates, n_days=4, seed=0):
    rng = np.random.default_rng(seed)
    x = np.array([0.25, 0.5, 1, 2, 3, 5, 7, 10, 20, 30.0])
    out = []
    for _ in range(n_days):
        z = rng.uniform(0.2, 1.0, len(rates))
        z /= z.sum()
        C = np.zeros((6, x.size))
        for i in range(6):
            k = rng.integers(2, x.size)
            C[i, :k] = 2.0
            C[i, k - 1] += 100.0
        h = np.exp(np.outer(x, rates)) @ z
        out.append(CashflowSystem(C @ h, C, x))
    return out


class TestNaiveFit:
    def test_exact_init_zero_error(self):
        rates = np.array([-0.02, -0.08])
        res = naive_fit(exponential_market(rates), 2, rates)
        assert res.price_rmse.max() <= 1e-9
        np.testing.assert_allclose(res.rates, rates, atol=1e-10)

    def test_perturbed_init_converges(self):
        rates = np.array([-0.02, -0.08])
        res = naive_fit(exponential_market(rates), 2, rates * 1.2)
        assert res.price_rmse.max() <= 1e-6
        assert res.yield_rmse.shape == (4,)

    def test_repeated_init_rates_give_finite_coefficients(self):
        rates = np.array([-0.05])
        res = naive_fit(exponential_market(rates), 2, [-0.05, -0.05])
        assert np.all(np.isfinite(res.daily_coefs))

    def test_init_length_checked(self):
        with pytest.raises(ValueError):
            naive_fit(exponential_market([-0.05]), 2, [-0.05])
