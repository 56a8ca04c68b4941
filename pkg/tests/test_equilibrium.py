import math

import numpy as np
import pytest

from conductgmm import equilibrium as eq
from conductgmm.exceptions import (
    DegenerateDenominatorError,
    DegenerateSlopeError,
    NoBracketError,
    NoEquilibriumError,
    NotUniqueError,
)
from conductgmm.model import DEFAULT_TRUE_PARAMS, MarketExogenous, ParameterVector

TRUTHS = DEFAULT_TRUE_PARAMS
ZERO_EXOG = MarketExogenous(0, 0, 0, 0, 0, 0, 0, 0)

# High-precision reference values, frozen from a 50-digit evaluation of the
# defining formulas.
E25 = 72004899337.38588
LOG_PRICE_AT_TRUTHS = 12.846573590279972
PRICE_AT_TRUTHS = 379486.2298882158
LOG_QUANTITY_AT_TRUTHS = 7.153426409720027
XI_MIXED_EXOG = 25.928571428571427


def random_exog(rng, sigma=1.0):
    return MarketExogenous(
        log_y=rng.normal(), z_r=rng.uniform(),
        log_w=math.log(rng.uniform(1, 3)), log_r=math.log(rng.uniform(1, 3)),
        log_h=math.log(rng.uniform(1, 4)), log_k=math.log(rng.uniform(1, 4)),
        eps_d=sigma * rng.normal(), eps_c=sigma * rng.normal(),
    )


def perturbed_params(rng, spread=0.5):
    base = TRUTHS.to_array()
    return ParameterVector.from_array(base * (1.0 + spread * rng.uniform(-1, 1, size=9)))


class TestXiComposite:
    def test_truths_zero_exog(self):
        assert eq.xi_composite(TRUTHS, ZERO_EXOG) == pytest.approx(25.0, abs=1e-12)

    def test_all_cost_terms_vanish(self):
        params = TRUTHS.replace(gamma0=0.0, gamma1=0.0, gamma2=0.0, gamma3=0.0)
        exog = MarketExogenous(0.7, 0.3, 0.1, 0.2, 0, 0, 0.5, 0.0)
        assert eq.xi_composite(params, exog) == 0.0

    def test_mixed_exogenous_high_precision(self):
        exog = MarketExogenous(log_y=0.3, z_r=0.5, log_w=0.7, log_r=1.0,
                               log_h=0, log_k=0, eps_d=0.1, eps_c=-0.2)
        assert eq.xi_composite(TRUTHS, exog) == pytest.approx(XI_MIXED_EXOG, rel=1e-12)

    def test_degenerate_slope(self):
        params = TRUTHS.replace(alpha1=0.0, alpha2=0.0)
        with pytest.raises(DegenerateSlopeError):
            eq.xi_composite(params, ZERO_EXOG)


class TestFixedPointResidual:
    def test_zero_at_solved_price(self):
        price = eq.solve_price(TRUTHS, ZERO_EXOG)
        residual = eq.fixed_point_residual(price, TRUTHS, ZERO_EXOG)
        assert abs(residual) <= 1e-8 * max(1.0, E25)

    def test_negative_when_line_term_vanishes(self):
        # theta * slope = 1 kills the line term; the power term stays positive.
        params = TRUTHS.replace(alpha1=1.0, alpha2=0.0, theta=1.0)
        for p in (0.1, 1.0, 10.0, 1e4):
            assert eq.fixed_point_residual(p, params, ZERO_EXOG) < 0.0

    def test_value_at_unit_price(self):
        assert eq.fixed_point_residual(1.0, TRUTHS, ZERO_EXOG) == pytest.approx(
            0.5 - E25, rel=1e-12)

    def test_rejects_nonpositive_price(self):
        with pytest.raises(ValueError):
            eq.fixed_point_residual(0.0, TRUTHS, ZERO_EXOG)


class TestClassification:
    def test_no_equilibrium_when_margin_nonpositive(self):
        params = TRUTHS.replace(alpha1=1.0, alpha2=0.1, theta=1.0)
        exog = MarketExogenous(0, 0.5, 0, 0, 0, 0, 0, 0)
        result = eq.classify_equilibrium(params, exog)
        assert result.kind is eq.EquilibriumKind.NO_EQUILIBRIUM

    def test_unique_at_truths(self):
        result = eq.classify_equilibrium(TRUTHS, ZERO_EXOG)
        assert result.kind is eq.EquilibriumKind.UNIQUE
        assert result.price == pytest.approx(PRICE_AT_TRUTHS, rel=1e-12)

    def test_knife_edge_infinitely_many(self):
        params = TRUTHS.replace(alpha2=0.0, gamma1=-1.0)
        eps_c = math.log(0.5) - (params.gamma0 - params.alpha0)
        exog = MarketExogenous(0, 0, 0, 0, 0, 0, 0, eps_c)
        result = eq.classify_equilibrium(params, exog)
        assert result.kind is eq.EquilibriumKind.INFINITELY_MANY

    def test_knife_edge_without_level_match_has_no_equilibrium(self):
        params = TRUTHS.replace(alpha2=0.0, gamma1=-1.0)
        exog = MarketExogenous(0, 0, 0, 0, 0, 0, 0, 15.0)
        result = eq.classify_equilibrium(params, exog)
        assert result.kind is eq.EquilibriumKind.NO_EQUILIBRIUM

    def test_invariant_to_slope_representation(self):
        # Identical composite slope via different (alpha1, alpha2, z_r).
        a = TRUTHS.replace(alpha1=1.0, alpha2=0.1)
        b = TRUTHS.replace(alpha1=1.05, alpha2=0.0)
        exog_a = MarketExogenous(0.2, 0.5, 0.1, 0.3, 0, 0, 0.05, -0.1)
        exog_b = MarketExogenous(0.2, 0.9, 0.1, 0.3, 0, 0, 0.05, -0.1)
        ra = eq.classify_equilibrium(a, exog_a)
        rb = eq.classify_equilibrium(b, exog_b)
        assert ra.kind is rb.kind
        assert ra.price == pytest.approx(rb.price, rel=1e-12)


class TestSolvePrice:
    def test_truths_zero_exog(self):
        price = eq.solve_price(TRUTHS, ZERO_EXOG)
        assert math.log(price) == pytest.approx(LOG_PRICE_AT_TRUTHS, abs=1e-10)
        assert price == pytest.approx(PRICE_AT_TRUTHS, rel=1e-12)

    def test_flat_cost_perfect_competition_price_is_marginal_cost(self):
        params = TRUTHS.replace(gamma1=0.0, theta=0.0)
        exog = MarketExogenous(0.5, 0.2, 0.3, 0.1, 0, 0, 0.1, -0.3)
        price = eq.solve_price(params, exog)
        assert math.log(price) == pytest.approx(eq.xi_composite(params, exog), rel=1e-12)

    def test_not_unique_raises(self):
        params = TRUTHS.replace(alpha1=1.0, alpha2=0.0, theta=1.0)
        with pytest.raises(NotUniqueError):
            eq.solve_price(params, ZERO_EXOG)

    def test_agrees_with_bisection_on_random_unique_draws(self):
        rng = np.random.default_rng(1234)
        checked = 0
        while checked < 1000:
            params = perturbed_params(rng)
            exog = random_exog(rng)
            result = eq.classify_equilibrium(params, exog)
            if result.kind is not eq.EquilibriumKind.UNIQUE:
                continue
            closed = math.log(eq.solve_price(params, exog))
            bisected = math.log(eq.bisection_oracle(params, exog))
            assert abs(closed - bisected) <= 1e-8
            checked += 1


class TestSolveQuantity:
    def test_truths_zero_exog(self):
        assert eq.solve_quantity(TRUTHS, ZERO_EXOG) == pytest.approx(
            LOG_QUANTITY_AT_TRUTHS, abs=1e-12)

    def test_collapsing_numerator(self):
        params = TRUTHS.replace(alpha0=5.0, gamma0=5.0, theta=0.0,
                                alpha1=1.0, alpha2=0.0, gamma1=1.0)
        assert eq.solve_quantity(params, ZERO_EXOG) == pytest.approx(0.0, abs=1e-14)

    def test_no_equilibrium_raises(self):
        params = TRUTHS.replace(theta=1.0, alpha1=1.5, alpha2=0.0)
        with pytest.raises(NoEquilibriumError):
            eq.solve_quantity(params, ZERO_EXOG)

    def test_degenerate_denominator_raises(self):
        params = TRUTHS.replace(gamma1=-1.0, alpha1=1.0, alpha2=0.0, theta=0.1)
        with pytest.raises(DegenerateDenominatorError):
            eq.solve_quantity(params, ZERO_EXOG)

    def test_demand_equation_round_trip(self):
        # Substituting the quantity into the demand equation must reproduce
        # the closed-form log price.
        rng = np.random.default_rng(77)
        checked = 0
        while checked < 10_000:
            params = perturbed_params(rng)
            exog = random_exog(rng)
            if eq.classify_equilibrium(params, exog).kind is not eq.EquilibriumKind.UNIQUE:
                continue
            log_q = eq.solve_quantity(params, exog)
            s = params.alpha1 + params.alpha2 * exog.z_r
            log_p = params.alpha0 - s * log_q + params.alpha3 * exog.log_y + exog.eps_d
            assert abs(log_p - math.log(eq.solve_price(params, exog))) <= 1e-10
            checked += 1


class TestBisectionOracle:
    def test_truths_zero_exog(self):
        root = eq.bisection_oracle(TRUTHS, ZERO_EXOG)
        assert math.log(root) == pytest.approx(LOG_PRICE_AT_TRUTHS, abs=1e-10)

    def test_flat_cost_case(self):
        params = TRUTHS.replace(gamma1=0.0, theta=0.0)
        root = eq.bisection_oracle(params, ZERO_EXOG)
        assert math.log(root) == pytest.approx(eq.xi_composite(params, ZERO_EXOG), abs=1e-10)

    def test_no_bracket_on_parallel_knife_edge(self):
        params = TRUTHS.replace(alpha2=0.0, gamma1=-1.0)
        exog = MarketExogenous(0, 0, 0, 0, 0, 0, 0, 15.0)
        with pytest.raises(NoBracketError):
            eq.bisection_oracle(params, exog)


class TestNoEquilibriumProperty:
    def test_negative_residual_everywhere(self):
        # Whenever the existence margin is nonpositive the classification is
        # no-equilibrium and the fixed-point curve stays below zero.
        rng = np.random.default_rng(4242)
        prices = np.geomspace(1e-6, 1e6, 25)
        checked = 0
        while checked < 10_000:
            params = perturbed_params(rng)
            exog = random_exog(rng)
            s = params.alpha1 + params.alpha2 * exog.z_r
            if abs(s) < 1e-9 or 1.0 - params.theta * s > 0.0:
                continue
            assert eq.classify_equilibrium(params, exog).kind is eq.EquilibriumKind.NO_EQUILIBRIUM
            for p in prices[:: 5 if checked % 100 else 1]:
                assert eq.fixed_point_residual(float(p), params, exog) < 0.0
            checked += 1


class TestDeltaCurve:
    def test_root_on_grid(self):
        price = eq.solve_price(TRUTHS, ZERO_EXOG)
        samples = eq.sample_delta_curve(TRUTHS, ZERO_EXOG, [price])
        assert len(samples) == 1
        assert abs(samples[0].delta) <= 1e-8 * max(1.0, samples[0].term2)

    def test_power_term_decreasing_when_exponent_negative(self):
        grid = np.linspace(0.5, 50.0, 40)
        samples = eq.sample_delta_curve(TRUTHS, ZERO_EXOG, grid)
        term2 = np.array([s.term2 for s in samples])
        assert np.all(np.diff(term2) < 0.0)

    def test_power_term_convex_increasing_when_exponent_above_one(self):
        params = TRUTHS.replace(gamma1=-2.0, alpha1=1.0, alpha2=0.0, gamma0=-20.0)
        grid = np.linspace(0.5, 20.0, 50)
        samples = eq.sample_delta_curve(params, ZERO_EXOG, grid)
        term2 = np.array([s.term2 for s in samples])
        assert np.all(np.diff(term2) > 0.0)
        assert np.all(np.diff(term2, 2) >= -1e-12)

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            eq.sample_delta_curve(TRUTHS, ZERO_EXOG, [-1.0])
