"""Equilibrium existence, uniqueness, and pricing for the log-linear model.

Writing the demand slope as ``s = alpha1 + alpha2 * z_r`` and collecting all
exogenous and cost terms into the composite

    Xi = gamma0 + gamma1 * (alpha0 + alpha3 * log_y + eps_d) / s
         + gamma2 * log_w + gamma3 * log_r + eps_c,

a positive price P is an equilibrium iff it is a root of

    Delta(P) = (1 - theta * s) * P - exp(Xi) * P ** (-gamma1 / s).

The case analysis over (1 - theta * s, -gamma1 / s) determines whether there
is no positive root, exactly one, or a continuum; when unique, the root has
the closed form

    log P* = -s / (gamma1 + s) * (log(1 - theta * s) - Xi).

All price arithmetic is done in log space: at the default truth vector Xi is
about 25, so level-space evaluation would overflow long before the parameter
ranges exercised by the simulations are exhausted.
"""

from __future__ import annotations

import dataclasses
import enum
import math

from .exceptions import (
    DegenerateDenominatorError,
    DegenerateSlopeError,
    NoBracketError,
    NoEquilibriumError,
    NonFiniteError,
    NotUniqueError,
)
from .model import MarketExogenous, ParameterVector

SLOPE_EPS = 1e-12
"""Magnitude below which the composite demand slope counts as zero."""

TOL_EQ = 1e-12
"""Relative tolerance for the knife-edge equality tests of the case analysis."""

BRACKET_HALF_WIDTH = 60.0
BRACKET_EXPANSIONS = 8
BISECT_TOL = 1e-12


class EquilibriumKind(enum.Enum):
    NO_EQUILIBRIUM = "no-equilibrium"
    UNIQUE = "unique"
    INFINITELY_MANY = "infinitely-many"


@dataclasses.dataclass(frozen=True)
class EquilibriumClass:
    """Classification of the positive-price equilibrium set.

    ``price`` is populated only for the unique case.
    """

    kind: EquilibriumKind
    price: float | None = None


def _slope(params: ParameterVector, exog: MarketExogenous) -> float:
    s = params.alpha1 + params.alpha2 * exog.z_r
    if abs(s) <= SLOPE_EPS:
        raise DegenerateSlopeError(
            f"alpha1 + alpha2 * z_r = {s!r} is numerically zero"
        )
    return s


def xi_composite(params: ParameterVector, exog: MarketExogenous) -> float:
    """Composite of all exogenous and cost terms entering the price equation."""
    s = _slope(params, exog)
    return (
        params.gamma0
        + params.gamma1 * (params.alpha0 + params.alpha3 * exog.log_y + exog.eps_d) / s
        + params.gamma2 * exog.log_w
        + params.gamma3 * exog.log_r
        + exog.eps_c
    )


def fixed_point_residual(p: float, params: ParameterVector, exog: MarketExogenous) -> float:
    """Evaluate Delta(p); any positive equilibrium price is a root.

    Raises ``NonFiniteError`` instead of silently saturating when the power
    term overflows.
    """
    if not p > 0:
        raise ValueError(f"price must be positive, got {p!r}")
    s = _slope(params, exog)
    xi = xi_composite(params, exog)
    term1 = (1.0 - params.theta * s) * p
    log_term2 = xi - (params.gamma1 / s) * math.log(p)
    try:
        term2 = math.exp(log_term2)
    except OverflowError:
        raise NonFiniteError(f"exp({log_term2!r}) overflows") from None
    value = term1 - term2
    if not math.isfinite(value):
        raise NonFiniteError(f"Delta({p!r}) is not finite")
    return value


def _close_rel(a: float, b: float, tol: float = TOL_EQ) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def classify_equilibrium(params: ParameterVector, exog: MarketExogenous) -> EquilibriumClass:
    """Count positive equilibrium prices for one parameter/exogenous draw.

    The knife-edge equality tests (``-gamma1 / s = 1`` and
    ``exp(Xi) = 1 - theta * s``) use the relative tolerance ``TOL_EQ``;
    under any continuous data-generating process these cases have measure
    zero, so the tolerance only protects handcrafted inputs.
    """
    s = _slope(params, exog)
    margin = 1.0 - params.theta * s
    if margin <= 0.0:
        return EquilibriumClass(EquilibriumKind.NO_EQUILIBRIUM)
    ratio = -params.gamma1 / s
    if not _close_rel(ratio, 1.0):
        return EquilibriumClass(EquilibriumKind.UNIQUE, price=_unique_price(params, exog, s, margin))
    # Knife edge: Delta collapses to a line through the origin.  Compare
    # exp(Xi) with the margin in log space so huge Xi cannot overflow.
    xi = xi_composite(params, exog)
    if _close_rel(xi, math.log(margin)):
        return EquilibriumClass(EquilibriumKind.INFINITELY_MANY)
    return EquilibriumClass(EquilibriumKind.NO_EQUILIBRIUM)


def _unique_log_price(params: ParameterVector, exog: MarketExogenous, s: float, margin: float) -> float:
    denom = params.gamma1 + s
    xi = xi_composite(params, exog)
    log_price = -s / denom * (math.log(margin) - xi)
    if not math.isfinite(log_price):
        raise NonFiniteError(f"log price {log_price!r} is not finite")
    return log_price


def _unique_price(params: ParameterVector, exog: MarketExogenous, s: float, margin: float) -> float:
    log_price = _unique_log_price(params, exog, s, margin)
    try:
        price = math.exp(log_price)
    except OverflowError:
        raise NonFiniteError(f"exp({log_price!r}) overflows") from None
    if price == 0.0:
        raise NonFiniteError(f"price underflows to zero at log price {log_price!r}")
    return price


def solve_price(params: ParameterVector, exog: MarketExogenous) -> float:
    """Closed-form unique equilibrium price.

    Requires the classification to be unique; raises ``NotUniqueError``
    otherwise and ``NonFiniteError`` if the price leaves the representable
    range.
    """
    s = _slope(params, exog)
    margin = 1.0 - params.theta * s
    if margin <= 0.0 or _close_rel(-params.gamma1 / s, 1.0):
        raise NotUniqueError("no unique equilibrium price for these inputs")
    return _unique_price(params, exog, s, margin)


def solve_quantity(params: ParameterVector, exog: MarketExogenous) -> float:
    """Equilibrium log quantity.

    Substituting the result into the demand equation reproduces the log of
    ``solve_price``.
    """
    s = _slope(params, exog)
    margin = 1.0 - params.theta * s
    if margin <= 0.0:
        raise NoEquilibriumError(f"1 - theta * slope = {margin!r} <= 0")
    denom = params.gamma1 + s
    if abs(denom) <= SLOPE_EPS:
        raise DegenerateDenominatorError(f"gamma1 + slope = {denom!r} is numerically zero")
    return (
        params.alpha0
        + params.alpha3 * exog.log_y
        + math.log(margin)
        - params.gamma0
        - params.gamma2 * exog.log_w
        - params.gamma3 * exog.log_r
        + exog.eps_d
        - exog.eps_c
    ) / denom


def bisection_oracle(params: ParameterVector, exog: MarketExogenous) -> float:
    """Root of Delta found by sign-change bracketing in log price.

    Independent check on the closed form: brackets over
    ``log P in [-60, 60]`` (doubled outward at most 8 times), then bisects
    to 1e-12 absolute in log price.  The residual sign is evaluated through
    the scaled form ``exp(a - m) - exp(b - m)`` with
    ``a = log(1 - theta s) + x``, ``b = Xi - (gamma1 / s) x`` and
    ``m = max(a, b)``, which has the sign of Delta(e^x) and cannot
    overflow.  Raises ``NoBracketError`` when no sign change is found,
    which signals a classification bug.
    """
    s = _slope(params, exog)
    margin = 1.0 - params.theta * s
    if margin <= 0.0:
        raise NotUniqueError("bisection requires the unique-equilibrium regime")
    xi = xi_composite(params, exog)
    log_margin = math.log(margin)
    exponent = -params.gamma1 / s

    def scaled_delta(x: float) -> float:
        a = log_margin + x
        b = xi + exponent * x
        m = max(a, b)
        return math.exp(a - m) - math.exp(b - m)

    lo, hi = -BRACKET_HALF_WIDTH, BRACKET_HALF_WIDTH
    f_lo, f_hi = scaled_delta(lo), scaled_delta(hi)
    expansions = 0
    while f_lo * f_hi > 0.0:
        if expansions >= BRACKET_EXPANSIONS:
            raise NoBracketError(
                f"no sign change of Delta on log price in [{lo}, {hi}]"
            )
        width = hi - lo
        lo -= width / 2.0
        hi += width / 2.0
        f_lo, f_hi = scaled_delta(lo), scaled_delta(hi)
        expansions += 1

    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        f_mid = scaled_delta(mid)
        if f_mid == 0.0:
            lo = hi = mid
            break
        if f_lo * f_mid < 0.0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    root = 0.5 * (lo + hi)
    try:
        price = math.exp(root)
    except OverflowError:
        raise NonFiniteError(f"exp({root!r}) overflows") from None
    if price == 0.0:
        raise NonFiniteError(f"price underflows to zero at log price {root!r}")
    return price


@dataclasses.dataclass(frozen=True)
class DeltaSample:
    """One sampled point of the fixed-point curve and its two terms."""

    p: float
    term1: float
    term2: float
    delta: float


def sample_delta_curve(
    params: ParameterVector,
    exog: MarketExogenous,
    grid,
) -> list[DeltaSample]:
    """Sample the line term, the power term, and Delta along a price grid.

    Intended for CSV emission so the existence/uniqueness geometry can be
    plotted externally.
    """
    s = _slope(params, exog)
    xi = xi_composite(params, exog)
    samples = []
    for p in grid:
        p = float(p)
        if not (p > 0 and math.isfinite(p)):
            raise ValueError(f"grid prices must be positive and finite, got {p!r}")
        term1 = (1.0 - params.theta * s) * p
        log_term2 = xi - (params.gamma1 / s) * math.log(p)
        try:
            term2 = math.exp(log_term2)
        except OverflowError:
            raise NonFiniteError(f"exp({log_term2!r}) overflows") from None
        samples.append(DeltaSample(p=p, term1=term1, term2=term2, delta=term1 - term2))
    return samples
