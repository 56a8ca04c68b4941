import math

import numpy as np
import pytest

from conductgmm import dgp, gmm
from conductgmm.exceptions import LogDomainError, NonPositiveMCError, SingularGramError
from conductgmm.model import (
    DEFAULT_TRUE_PARAMS,
    Dataset,
    MarketExogenous,
    MarketObservation,
    ModelKind,
    ParameterVector,
)

TRUTHS = DEFAULT_TRUE_PARAMS


def make(model=ModelKind.LOG_LINEAR, sigma=1.0, t=100, seed=42):
    return dgp.generate_dataset(dgp.DgpConfig(model=model, sigma=sigma, t=t, seed=seed))


def zero_exog_market():
    exog = MarketExogenous(0, 0, 0, 0, 0, 0, 0, 0)
    return dgp.generate_market(TRUTHS, exog)


def manual_dataset(z_r_values):
    markets = tuple(
        MarketObservation(
            exog=MarketExogenous(0, z, 0, 0, 0, 0, 0, 0), log_p=1.0, log_q=1.0)
        for z in z_r_values
    )
    return Dataset(model=ModelKind.LOG_LINEAR, markets=markets)


def random_feasible_params(rng, spread=0.2):
    # Perturb around the truth vector, keeping the supply log argument and
    # the slope families safely positive.
    while True:
        xi = ParameterVector.from_array(
            TRUTHS.to_array() + spread * rng.uniform(-1, 1, size=9))
        s_max = xi.alpha1 + max(0.0, xi.alpha2)
        if xi.alpha1 > 0.1 and xi.gamma1 > 0.1 and 1.0 - xi.theta * s_max > 0.05:
            return xi


class TestInstruments:
    def test_defaults_and_dimensions(self):
        dataset = make(t=20)
        instruments = gmm.build_instruments(dataset)
        assert instruments.demand_fields == gmm.DEFAULT_DEMAND_INSTRUMENTS
        assert instruments.supply_fields == gmm.DEFAULT_SUPPLY_INSTRUMENTS
        assert instruments.k_d == 5 and instruments.k_c == 5
        # Ten moment conditions against nine parameters: order condition.
        assert instruments.k_d + instruments.k_c > 9

    def test_constant_column_first(self):
        dataset = make(t=50)
        instruments = gmm.build_instruments(dataset)
        assert np.all(instruments.z_d[:, 0] == 1.0)
        assert np.all(instruments.z_c[:, 0] == 1.0)

    def test_zero_exogenous_market_row(self):
        dataset = Dataset(model=ModelKind.LOG_LINEAR, markets=(zero_exog_market(),))
        instruments = gmm.build_instruments(dataset)
        np.testing.assert_array_equal(instruments.z_d[0], [1, 0, 0, 0, 0])

    def test_unknown_column_rejected(self):
        dataset = make(t=5)
        with pytest.raises(ValueError):
            gmm.build_instruments(dataset, demand_fields=("const", "log_p"))
        with pytest.raises(ValueError):
            gmm.build_instruments(dataset, demand_fields=("const", "bogus"))

    def test_interaction_columns(self):
        dataset = make(t=8)
        instruments = gmm.build_instruments(
            dataset, supply_fields=("const", "z_r", "z_r*log_y"))
        z = np.array([m.exog.z_r for m in dataset])
        y = np.array([m.exog.log_y for m in dataset])
        np.testing.assert_allclose(instruments.z_c[:, 2], z * y)

    def test_linear_defaults_include_rotation_interaction(self):
        dataset = make(model=ModelKind.LINEAR, t=10)
        instruments = gmm.build_instruments(dataset)
        assert "z_r*log_y" in instruments.supply_fields


class TestWeightMatrix:
    def test_single_market_identity(self):
        dataset = manual_dataset([0.0])
        instruments = gmm.build_instruments(
            dataset, demand_fields=("const",), supply_fields=("const",))
        np.testing.assert_allclose(gmm.weight_matrix(instruments), np.eye(2), atol=1e-14)

    def test_two_market_hand_computation(self):
        dataset = manual_dataset([1.0, 3.0])
        instruments = gmm.build_instruments(
            dataset, demand_fields=("z_r",), supply_fields=("const",))
        w = gmm.weight_matrix(instruments)
        np.testing.assert_allclose(w, np.diag([0.2, 1.0]), atol=1e-14)

    def test_symmetric_positive_definite(self):
        dataset = make(t=200, seed=5)
        w = gmm.weight_matrix(gmm.build_instruments(dataset))
        assert np.max(np.abs(w - w.T)) <= 1e-12
        eigenvalues = np.linalg.eigvalsh(w)
        assert eigenvalues.min() > -1e-10 * np.trace(w)

    def test_inverse_property(self):
        dataset = make(t=150, seed=6)
        instruments = gmm.build_instruments(dataset)
        t = len(dataset)
        gram_d = instruments.z_d.T @ instruments.z_d / t
        gram_c = instruments.z_c.T @ instruments.z_c / t
        gram = np.zeros((10, 10))
        gram[:5, :5], gram[5:, 5:] = gram_d, gram_c
        np.testing.assert_allclose(gmm.weight_matrix(instruments) @ gram, np.eye(10), atol=1e-8)

    def test_singular_gram_rejected(self):
        dataset = make(t=30)
        instruments = gmm.build_instruments(
            dataset, demand_fields=("const", "const"), supply_fields=("const",))
        with pytest.raises(SingularGramError):
            gmm.weight_matrix(instruments)


class TestResiduals:
    def test_zero_exog_market_residuals_vanish_at_truths(self):
        market = zero_exog_market()
        assert abs(gmm.demand_residual(TRUTHS, market)) <= 1e-12
        assert abs(gmm.supply_residual(TRUTHS, market)) <= 1e-12

    def test_residuals_recover_drawn_errors(self):
        dataset = make(t=500, seed=11)
        for market in dataset.markets[:100]:
            assert gmm.demand_residual(TRUTHS, market) == pytest.approx(
                market.exog.eps_d, abs=1e-12)
            assert gmm.supply_residual(TRUTHS, market) == pytest.approx(
                market.exog.eps_c, abs=1e-12)

    def test_intercept_shift_moves_demand_residual_linearly(self):
        market = zero_exog_market()
        shifted = TRUTHS.replace(alpha0=TRUTHS.alpha0 + 1.0)
        assert gmm.demand_residual(shifted, market) == pytest.approx(-1.0, abs=1e-12)

    def test_supply_log_domain(self):
        market = zero_exog_market()
        with pytest.raises(LogDomainError):
            gmm.supply_residual(TRUTHS.replace(theta=2.0), market)

    def test_supply_residual_at_zero_conduct(self):
        market = zero_exog_market()
        xi = TRUTHS.replace(theta=0.0)
        expected = (market.log_p - xi.gamma0 - xi.gamma1 * market.log_q
                    - xi.gamma2 * market.exog.log_w - xi.gamma3 * market.exog.log_r)
        assert gmm.supply_residual(xi, market) == pytest.approx(expected, abs=1e-14)


class TestMoments:
    def test_zero_noise_moments_vanish_at_truths(self):
        dataset = make(sigma=0.0, t=80, seed=3)
        ctx = gmm.build_moment_context(dataset)
        g = gmm.moment_vector(TRUTHS, ctx)
        assert np.max(np.abs(g)) <= 1e-13
        assert gmm.objective(TRUTHS, ctx) <= 1e-26

    def test_single_market_average(self):
        dataset = make(t=1, seed=9)
        ctx = gmm.build_moment_context(dataset)
        market = dataset.markets[0]
        g = gmm.moment_vector(TRUTHS, ctx)
        eps_d = gmm.demand_residual(TRUTHS, market)
        eps_c = gmm.supply_residual(TRUTHS, market)
        np.testing.assert_allclose(g[:5], eps_d * ctx.instruments.z_d[0], atol=1e-14)
        np.testing.assert_allclose(g[5:], eps_c * ctx.instruments.z_c[0], atol=1e-14)

    def test_objective_nonnegative(self):
        dataset = make(t=60, seed=12)
        ctx = gmm.build_moment_context(dataset)
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert gmm.objective(random_feasible_params(rng), ctx) >= 0.0

    def test_matches_naive_double_loop(self):
        # Deliberately naive reimplementation: per-market python loops over
        # residuals, instruments, and the quadratic form.
        dataset = make(t=3, seed=7)
        ctx = gmm.build_moment_context(dataset)
        rng = np.random.default_rng(21)
        for _ in range(10):
            xi = random_feasible_params(rng)
            t = len(dataset)
            g = np.zeros(10)
            for i, market in enumerate(dataset.markets):
                eps_d = gmm.demand_residual(xi, market)
                eps_c = gmm.supply_residual(xi, market)
                for k in range(5):
                    g[k] += eps_d * ctx.instruments.z_d[i, k] / t
                    g[5 + k] += eps_c * ctx.instruments.z_c[i, k] / t
            value = 0.0
            for a in range(10):
                for b in range(10):
                    value += g[a] * ctx.weight[a, b] * g[b]
            np.testing.assert_allclose(gmm.moment_vector(xi, ctx), g, atol=1e-12)
            assert gmm.objective(xi, ctx) == pytest.approx(value, abs=1e-12)

    def test_objective_concentrates_at_truths(self):
        # Median objective at the truth vector across 50 replication streams
        # falls as the market count doubles; the streams are prefix-nested,
        # so the per-seed comparison is sharp enough for a 45/50 rule.
        sizes = [125, 250, 500, 1000, 2000, 4000, 8000]
        values = np.zeros((50, len(sizes)))
        x = TRUTHS.to_array()
        for i in range(50):
            for j, t in enumerate(sizes):
                dataset = dgp.generate_dataset(dgp.DgpConfig(
                    model=ModelKind.LOG_LINEAR, sigma=1.0, t=t,
                    seed=dgp.derive_seed(99, 0, i)))
                values[i, j] = gmm.objective_array(x, gmm.build_moment_context(dataset))
        medians = np.median(values, axis=0)
        assert np.all(np.diff(medians) < 0.0)
        for j in range(len(sizes) - 1):
            assert np.sum(values[:, j + 1] < values[:, j]) >= 45


class TestGradient:
    def test_matches_central_differences(self):
        dataset = make(t=50, seed=15)
        ctx = gmm.build_moment_context(dataset)
        rng = np.random.default_rng(31)
        for _ in range(25):
            xi = random_feasible_params(rng)
            x = xi.to_array()
            analytic = gmm.objective_gradient(xi, ctx)
            for i in range(9):
                h = 1e-6 * max(1.0, abs(x[i]))
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd = (gmm.objective_array(xp, ctx) - gmm.objective_array(xm, ctx)) / (2 * h)
                assert abs(analytic[i] - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_gradient_zero_at_zero_noise_truths(self):
        dataset = make(sigma=0.0, t=100, seed=2)
        ctx = gmm.build_moment_context(dataset)
        assert np.max(np.abs(gmm.objective_gradient(TRUTHS, ctx))) <= 1e-8

    def test_linear_model_gradient(self):
        dataset = make(model=ModelKind.LINEAR, t=50, seed=16)
        ctx = gmm.build_moment_context(dataset)
        rng = np.random.default_rng(32)
        for _ in range(10):
            x = random_feasible_params(rng).to_array()
            _, analytic = gmm.objective_gradient_array(x, ctx)
            for i in range(9):
                h = 1e-6 * max(1.0, abs(x[i]))
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd = (gmm.objective_array(xp, ctx) - gmm.objective_array(xm, ctx)) / (2 * h)
                assert abs(analytic[i] - fd) <= 1e-5 * max(1.0, abs(fd))


class TestMpec:
    def test_identity_substitution(self):
        dataset = make(t=40, seed=17)
        rng = np.random.default_rng(33)
        checked = 0
        while checked < 10_000:
            xi = random_feasible_params(rng)
            for market in dataset.markets:
                s = xi.alpha1 + xi.alpha2 * market.exog.z_r
                mc = math.exp(market.log_p) * (1.0 - xi.theta * s)
                assert abs(gmm.mpec_equality(xi, mc, market)) <= 1e-9 * max(1.0, mc)
                assert gmm.mpec_supply_residual(xi, mc, market) == pytest.approx(
                    gmm.supply_residual(xi, market), abs=1e-12)
                checked += 1

    def test_zero_exog_market_values(self):
        market = zero_exog_market()
        mc = 0.5 * math.exp(market.log_p)
        assert mc == pytest.approx(189743.1149441079, rel=1e-12)
        assert abs(gmm.mpec_supply_residual(TRUTHS, mc, market)) <= 1e-12
        assert abs(gmm.mpec_equality(TRUTHS, mc, market)) <= 1e-9 * mc

    def test_zero_conduct_equality_is_price_minus_cost(self):
        market = zero_exog_market()
        xi = TRUTHS.replace(theta=0.0)
        mc = 123.0
        assert gmm.mpec_equality(xi, mc, market) == pytest.approx(
            math.exp(market.log_p) - mc, rel=1e-12)

    def test_nonpositive_mc_rejected(self):
        market = zero_exog_market()
        with pytest.raises(NonPositiveMCError):
            gmm.mpec_supply_residual(TRUTHS, 0.0, market)
        with pytest.raises(NonPositiveMCError):
            gmm.mpec_equality(TRUTHS, -1.0, market)

    def test_extended_gradient_matches_differences(self):
        dataset = make(t=20, seed=18)
        ctx = gmm.build_moment_context(dataset)
        rng = np.random.default_rng(34)
        x0 = gmm.mpec_start_array(TRUTHS.to_array(), ctx)
        x0[9:] += 0.01 * rng.standard_normal(20)
        f0, grad = gmm.mpec_objective_gradient_array(x0, ctx)
        for i in list(range(9)) + [9, 15, 28]:
            h = 1e-6 * max(1.0, abs(x0[i]))
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fp, _ = gmm.mpec_objective_gradient_array(xp, ctx)
            fm, _ = gmm.mpec_objective_gradient_array(xm, ctx)
            fd = (fp - fm) / (2 * h)
            assert abs(grad[i] - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_equality_jt_product_matches_differences(self):
        dataset = make(t=15, seed=19)
        ctx = gmm.build_moment_context(dataset)
        x0 = gmm.mpec_start_array(TRUTHS.to_array(), ctx)
        rng = np.random.default_rng(35)
        v = rng.standard_normal(15)
        analytic = gmm.mpec_equality_jt_prod(x0, v, ctx)
        for i in (1, 2, 8, 9, 20):
            h = 1e-7 * max(1.0, abs(x0[i]))
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fd = (gmm.mpec_equality_array(xp, ctx) - gmm.mpec_equality_array(xm, ctx)) / (2 * h)
            assert analytic[i] == pytest.approx(float(fd @ v), abs=1e-6)

    def test_start_is_exactly_feasible(self):
        dataset = make(t=30, seed=20)
        ctx = gmm.build_moment_context(dataset)
        x0 = gmm.mpec_start_array(TRUTHS.to_array(), ctx)
        assert np.max(np.abs(gmm.mpec_equality_array(x0, ctx))) <= 1e-15

    def test_projection_restores_identity(self):
        dataset = make(t=25, seed=21)
        ctx = gmm.build_moment_context(dataset)
        x = gmm.mpec_start_array(TRUTHS.to_array(), ctx)
        x[9:] += 0.05
        projected = gmm.mpec_project_identity(x, ctx)
        assert np.max(np.abs(gmm.mpec_equality_array(projected, ctx))) <= 1e-15
        assert np.all(gmm.mpec_mc_levels(projected, ctx) > 0.0)
