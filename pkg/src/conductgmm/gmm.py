"""Moment conditions and the N2SLS objective for the two-equation system.

Residuals
---------
Log-linear model, with ``s_t = alpha1 + alpha2 * z_r_t``:

    eps_d_t = log_p_t - alpha0 + s_t * log_q_t - alpha3 * log_y_t
    eps_c_t = log_p_t + log(1 - theta * s_t)
              - gamma0 - gamma1 * log_q_t - gamma2 * log_w_t - gamma3 * log_r_t

Linear model (the shifter fields hold levels):

    eps_d_t = p_t - alpha0 + s_t * q_t - alpha3 * y_t
    eps_c_t = p_t - theta * s_t * q_t
              - gamma0 - gamma1 * q_t - gamma2 * w_t - gamma3 * r_t

The sample moments stack demand- and supply-side instrument averages,

    g(xi) = [ mean_t eps_d_t * z_d_t ; mean_t eps_c_t * z_c_t ],

and the objective is the quadratic form ``g' W g`` with the one-step
weight ``W = [ mean_t blockdiag(z_d_t z_d_t', z_c_t z_c_t') ]^{-1}``.

The MPEC variant carries one auxiliary marginal-cost variable per market,
replaces the supply residual with ``log mc_t - gamma0 - gamma1 log_q_t -
gamma2 log_w_t - gamma3 log_r_t``, and ties the auxiliaries to the price
identity ``p_t (1 - theta s_t) = mc_t``.  Inside array-level code the
auxiliaries are parameterized as ``w_t = log(mc_t / p_t)``, which keeps
every quantity O(1) (prices reach 1e5 at the default truths) and makes
positivity of mc automatic.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.linalg

from .exceptions import LogDomainError, NonPositiveMCError, SingularGramError
from .model import Dataset, MarketObservation, ModelKind, ParameterVector

DEFAULT_DEMAND_INSTRUMENTS = ("const", "z_r", "log_y", "log_h", "log_k")
DEFAULT_SUPPLY_INSTRUMENTS = ("const", "z_r", "log_w", "log_r", "log_y")
DEFAULT_LINEAR_DEMAND_INSTRUMENTS = ("const", "z_r", "log_y", "log_h", "log_k")
DEFAULT_LINEAR_SUPPLY_INSTRUMENTS = ("const", "z_r", "log_w", "log_r", "log_y", "z_r*log_y")

GRAM_CONDITION_LIMIT = 1e12

N_PARAMS = 9


@dataclasses.dataclass(frozen=True)
class InstrumentSet:
    """Per-market instrument rows; first column of each side is the constant."""

    z_d: np.ndarray
    z_c: np.ndarray
    demand_fields: tuple[str, ...]
    supply_fields: tuple[str, ...]

    @property
    def k_d(self) -> int:
        return self.z_d.shape[1]

    @property
    def k_c(self) -> int:
        return self.z_c.shape[1]


@dataclasses.dataclass(frozen=True)
class MomentContext:
    """Immutable bundle of data arrays, instruments, and the weight matrix."""

    model: ModelKind
    log_p: np.ndarray
    log_q: np.ndarray
    log_y: np.ndarray
    z_r: np.ndarray
    log_w: np.ndarray
    log_r: np.ndarray
    instruments: InstrumentSet
    weight: np.ndarray

    @property
    def n_markets(self) -> int:
        return self.log_p.shape[0]


def _dataset_columns(dataset: Dataset) -> dict[str, np.ndarray]:
    t = len(dataset)
    cols = {
        "const": np.ones(t),
        "log_p": np.empty(t), "log_q": np.empty(t),
        "log_y": np.empty(t), "z_r": np.empty(t),
        "log_w": np.empty(t), "log_r": np.empty(t),
        "log_h": np.empty(t), "log_k": np.empty(t),
    }
    for i, market in enumerate(dataset.markets):
        e = market.exog
        cols["log_p"][i] = market.log_p
        cols["log_q"][i] = market.log_q
        cols["log_y"][i] = e.log_y
        cols["z_r"][i] = e.z_r
        cols["log_w"][i] = e.log_w
        cols["log_r"][i] = e.log_r
        cols["log_h"][i] = e.log_h
        cols["log_k"][i] = e.log_k
    return cols


def _instrument_column(cols: dict[str, np.ndarray], name: str) -> np.ndarray:
    """Resolve an instrument column; ``a*b`` denotes an interaction."""
    factors = name.split("*")
    for factor in factors:
        if factor not in cols or factor in ("log_p", "log_q"):
            raise ValueError(f"unknown or endogenous instrument column {name!r}")
    out = cols[factors[0]]
    for factor in factors[1:]:
        out = out * cols[factor]
    return out


def build_instruments(
    dataset: Dataset,
    demand_fields: tuple[str, ...] | None = None,
    supply_fields: tuple[str, ...] | None = None,
) -> InstrumentSet:
    """Assemble instrument matrices from exogenous columns.

    Defaults put the excluded cost-side instruments (``log_h``, ``log_k``)
    on the demand side and the excluded demand shifter (``log_y``) on the
    supply side; the rotation instrument enters both.  The linear model
    adds rotation interactions, which carry the conduct identification
    there.  Override with any tuple of column names (``a*b`` products
    allowed) to experiment with alternatives.
    """
    if demand_fields is None:
        demand_fields = (DEFAULT_DEMAND_INSTRUMENTS if dataset.model is ModelKind.LOG_LINEAR
                         else DEFAULT_LINEAR_DEMAND_INSTRUMENTS)
    if supply_fields is None:
        supply_fields = (DEFAULT_SUPPLY_INSTRUMENTS if dataset.model is ModelKind.LOG_LINEAR
                         else DEFAULT_LINEAR_SUPPLY_INSTRUMENTS)
    demand_fields = tuple(demand_fields)
    supply_fields = tuple(supply_fields)
    cols = _dataset_columns(dataset)
    z_d = np.column_stack([_instrument_column(cols, name) for name in demand_fields])
    z_c = np.column_stack([_instrument_column(cols, name) for name in supply_fields])
    return InstrumentSet(z_d=z_d, z_c=z_c, demand_fields=demand_fields, supply_fields=supply_fields)


def weight_matrix(instruments: InstrumentSet) -> np.ndarray:
    """Inverse of the averaged block-diagonal instrument Gram matrix.

    Inversion goes through a Cholesky factorization with a condition-number
    guard so near-singular instrument sets fail loudly instead of
    producing a garbage weight.
    """
    t = instruments.z_d.shape[0]
    gram_d = instruments.z_d.T @ instruments.z_d / t
    gram_c = instruments.z_c.T @ instruments.z_c / t
    gram = scipy.linalg.block_diag(gram_d, gram_c)
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_CONDITION_LIMIT:
        raise SingularGramError(f"instrument Gram matrix condition number {cond:.3e}")
    try:
        cho = scipy.linalg.cho_factor(gram)
    except scipy.linalg.LinAlgError as exc:
        raise SingularGramError(str(exc)) from None
    w = scipy.linalg.cho_solve(cho, np.eye(gram.shape[0]))
    return 0.5 * (w + w.T)


def build_moment_context(
    dataset: Dataset,
    demand_fields: tuple[str, ...] | None = None,
    supply_fields: tuple[str, ...] | None = None,
) -> MomentContext:
    cols = _dataset_columns(dataset)
    instruments = build_instruments(dataset, demand_fields, supply_fields)
    return MomentContext(
        model=dataset.model,
        log_p=cols["log_p"], log_q=cols["log_q"],
        log_y=cols["log_y"], z_r=cols["z_r"],
        log_w=cols["log_w"], log_r=cols["log_r"],
        instruments=instruments,
        weight=weight_matrix(instruments),
    )


# ---------------------------------------------------------------------------
# Per-observation residual operations
# ---------------------------------------------------------------------------

def demand_residual(xi: ParameterVector, obs: MarketObservation) -> float:
    """Demand-equation error implied by one log-linear observation."""
    s = xi.alpha1 + xi.alpha2 * obs.exog.z_r
    return obs.log_p - xi.alpha0 + s * obs.log_q - xi.alpha3 * obs.exog.log_y


def supply_residual(xi: ParameterVector, obs: MarketObservation) -> float:
    """Supply-equation error implied by one log-linear observation.

    Defined only while ``1 - theta * s > 0``; outside that region the
    objective treats the point as infeasible.
    """
    s = xi.alpha1 + xi.alpha2 * obs.exog.z_r
    margin = 1.0 - xi.theta * s
    if margin <= 0.0:
        raise LogDomainError(f"1 - theta * slope = {margin!r} <= 0")
    return (
        obs.log_p + math.log(margin)
        - xi.gamma0 - xi.gamma1 * obs.log_q
        - xi.gamma2 * obs.exog.log_w - xi.gamma3 * obs.exog.log_r
    )


def mpec_supply_residual(xi: ParameterVector, mc: float, obs: MarketObservation) -> float:
    """Supply error computed from an explicit marginal-cost level."""
    if not mc > 0:
        raise NonPositiveMCError(f"marginal cost must be positive, got {mc!r}")
    return (
        math.log(mc)
        - xi.gamma0 - xi.gamma1 * obs.log_q
        - xi.gamma2 * obs.exog.log_w - xi.gamma3 * obs.exog.log_r
    )


def mpec_equality(xi: ParameterVector, mc: float, obs: MarketObservation) -> float:
    """Level-form price identity residual ``p (1 - theta s) - mc``.

    Zero exactly when the auxiliary marginal cost is consistent with the
    observed price, in which case the MPEC supply residual coincides with
    the reduced-form one.
    """
    if not mc > 0:
        raise NonPositiveMCError(f"marginal cost must be positive, got {mc!r}")
    s = xi.alpha1 + xi.alpha2 * obs.exog.z_r
    p = math.exp(obs.log_p)
    return p * (1.0 - xi.theta * s) - mc


# ---------------------------------------------------------------------------
# Vectorized core on raw parameter arrays (used by the solver)
# ---------------------------------------------------------------------------

def residual_arrays(x: np.ndarray, ctx: MomentContext) -> tuple[np.ndarray, np.ndarray]:
    """Demand and supply residual vectors at a raw parameter array."""
    a0, a1, a2, a3, g0, g1, g2, g3, theta = x
    s = a1 + a2 * ctx.z_r
    eps_d = ctx.log_p - a0 + s * ctx.log_q - a3 * ctx.log_y
    if ctx.model is ModelKind.LOG_LINEAR:
        margin = 1.0 - theta * s
        if np.any(margin <= 0.0):
            raise LogDomainError("1 - theta * slope <= 0 for some market")
        eps_c = (
            ctx.log_p + np.log(margin)
            - g0 - g1 * ctx.log_q - g2 * ctx.log_w - g3 * ctx.log_r
        )
    else:
        eps_c = (
            ctx.log_p - theta * s * ctx.log_q
            - g0 - g1 * ctx.log_q - g2 * ctx.log_w - g3 * ctx.log_r
        )
    return eps_d, eps_c


def _residual_jacobians(x: np.ndarray, ctx: MomentContext) -> tuple[np.ndarray, np.ndarray]:
    """Per-market derivative rows of the two residuals, shape (t, 9) each."""
    a0, a1, a2, a3, g0, g1, g2, g3, theta = x
    t = ctx.n_markets
    s = a1 + a2 * ctx.z_r
    d_d = np.zeros((t, N_PARAMS))
    d_d[:, 0] = -1.0
    d_d[:, 1] = ctx.log_q
    d_d[:, 2] = ctx.z_r * ctx.log_q
    d_d[:, 3] = -ctx.log_y
    d_c = np.zeros((t, N_PARAMS))
    d_c[:, 4] = -1.0
    d_c[:, 5] = -ctx.log_q
    d_c[:, 6] = -ctx.log_w
    d_c[:, 7] = -ctx.log_r
    if ctx.model is ModelKind.LOG_LINEAR:
        margin = 1.0 - theta * s
        if np.any(margin <= 0.0):
            raise LogDomainError("1 - theta * slope <= 0 for some market")
        d_c[:, 1] = -theta / margin
        d_c[:, 2] = -theta * ctx.z_r / margin
        d_c[:, 8] = -s / margin
    else:
        d_c[:, 1] = -theta * ctx.log_q
        d_c[:, 2] = -theta * ctx.z_r * ctx.log_q
        d_c[:, 8] = -s * ctx.log_q
    return d_d, d_c


def moments_array(x: np.ndarray, ctx: MomentContext) -> np.ndarray:
    eps_d, eps_c = residual_arrays(x, ctx)
    t = ctx.n_markets
    return np.concatenate([
        ctx.instruments.z_d.T @ eps_d / t,
        ctx.instruments.z_c.T @ eps_c / t,
    ])


def objective_array(x: np.ndarray, ctx: MomentContext) -> float:
    g = moments_array(x, ctx)
    return float(g @ ctx.weight @ g)


def objective_gradient_array(x: np.ndarray, ctx: MomentContext) -> tuple[float, np.ndarray]:
    """Objective value with its closed-form gradient (chain rule through g)."""
    t = ctx.n_markets
    eps_d, eps_c = residual_arrays(x, ctx)
    g = np.concatenate([
        ctx.instruments.z_d.T @ eps_d / t,
        ctx.instruments.z_c.T @ eps_c / t,
    ])
    wg = ctx.weight @ g
    d_d, d_c = _residual_jacobians(x, ctx)
    jac = np.vstack([
        ctx.instruments.z_d.T @ d_d / t,
        ctx.instruments.z_c.T @ d_c / t,
    ])
    return float(g @ wg), 2.0 * (jac.T @ wg)


# Public operation wrappers over ParameterVector.

def moment_vector(xi: ParameterVector, ctx: MomentContext) -> np.ndarray:
    """Stacked sample moments, length ``k_d + k_c``."""
    return moments_array(xi.to_array(), ctx)


def objective(xi: ParameterVector, ctx: MomentContext) -> float:
    """N2SLS quadratic form; nonnegative, zero iff the moments vanish."""
    return objective_array(xi.to_array(), ctx)


def objective_gradient(xi: ParameterVector, ctx: MomentContext) -> np.ndarray:
    """Analytic gradient of the objective in parameter order."""
    return objective_gradient_array(xi.to_array(), ctx)[1]


# ---------------------------------------------------------------------------
# MPEC reformulation on the extended vector [xi, w], w_t = log(mc_t / p_t)
# ---------------------------------------------------------------------------

def mpec_start_array(x0: np.ndarray, ctx: MomentContext) -> np.ndarray:
    """Extended start point with auxiliaries satisfying the price identity.

    Requires ``1 - theta0 * s_t > 0`` at the start, which is exactly the
    feasibility condition of the existence constraint family.
    """
    a1, a2, theta = x0[1], x0[2], x0[8]
    margin = 1.0 - theta * (a1 + a2 * ctx.z_r)
    if np.any(margin <= 0.0):
        raise LogDomainError("start point violates 1 - theta * slope > 0")
    return np.concatenate([x0, np.log(margin)])


def mpec_objective_gradient_array(x: np.ndarray, ctx: MomentContext) -> tuple[float, np.ndarray]:
    """Objective and gradient for the extended MPEC vector."""
    t = ctx.n_markets
    xi = x[:N_PARAMS]
    w = x[N_PARAMS:]
    a0, a1, a2, a3, g0, g1, g2, g3, theta = xi
    s = a1 + a2 * ctx.z_r
    eps_d = ctx.log_p - a0 + s * ctx.log_q - a3 * ctx.log_y
    eps_c = w + ctx.log_p - g0 - g1 * ctx.log_q - g2 * ctx.log_w - g3 * ctx.log_r
    z_d, z_c = ctx.instruments.z_d, ctx.instruments.z_c
    g = np.concatenate([z_d.T @ eps_d / t, z_c.T @ eps_c / t])
    wg = ctx.weight @ g
    wg_d, wg_c = wg[: z_d.shape[1]], wg[z_d.shape[1]:]

    d_d = np.zeros((t, N_PARAMS))
    d_d[:, 0] = -1.0
    d_d[:, 1] = ctx.log_q
    d_d[:, 2] = ctx.z_r * ctx.log_q
    d_d[:, 3] = -ctx.log_y
    d_c = np.zeros((t, N_PARAMS))
    d_c[:, 4] = -1.0
    d_c[:, 5] = -ctx.log_q
    d_c[:, 6] = -ctx.log_w
    d_c[:, 7] = -ctx.log_r

    grad = np.empty_like(x)
    grad[:N_PARAMS] = 2.0 * ((z_d.T @ d_d / t).T @ wg_d + (z_c.T @ d_c / t).T @ wg_c)
    grad[N_PARAMS:] = 2.0 * (z_c @ wg_c) / t
    return float(g @ wg), grad


def mpec_equality_array(x: np.ndarray, ctx: MomentContext) -> np.ndarray:
    """Price-scaled identity residuals ``(1 - theta s_t) - exp(w_t)``.

    Dividing the level identity by the (positive) observed price keeps the
    constraint O(1); the root set is unchanged.
    """
    a1, a2, theta = x[1], x[2], x[8]
    margin = 1.0 - theta * (a1 + a2 * ctx.z_r)
    return margin - np.exp(x[N_PARAMS:])


def mpec_equality_jt_prod(x: np.ndarray, v: np.ndarray, ctx: MomentContext) -> np.ndarray:
    """Transpose-Jacobian product of the scaled identity constraints."""
    a1, a2, theta = x[1], x[2], x[8]
    s = a1 + a2 * ctx.z_r
    out = np.zeros_like(x)
    out[1] = -theta * float(np.sum(v))
    out[2] = -theta * float(np.dot(ctx.z_r, v))
    out[8] = -float(np.dot(s, v))
    out[N_PARAMS:] = -np.exp(x[N_PARAMS:]) * v
    return out


def mpec_project_identity(x: np.ndarray, ctx: MomentContext) -> np.ndarray:
    """Snap the auxiliaries onto the price identity at the current xi.

    Used as a final feasibility rounding: after convergence the auxiliaries
    sit within solver tolerance of the identity, and the projection makes
    the reduced-form equivalence exact to machine precision.
    """
    a1, a2, theta = x[1], x[2], x[8]
    margin = 1.0 - theta * (a1 + a2 * ctx.z_r)
    if np.any(margin <= 0.0):
        raise LogDomainError("cannot project: 1 - theta * slope <= 0")
    out = x.copy()
    out[N_PARAMS:] = np.log(margin)
    return out


def mpec_mc_levels(x: np.ndarray, ctx: MomentContext) -> np.ndarray:
    """Marginal-cost levels implied by the extended vector."""
    return np.exp(x[N_PARAMS:] + ctx.log_p)


def mpec_wblock(
    x: np.ndarray,
    lam: np.ndarray,
    rho: float,
    ctx: MomentContext,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Auxiliary-block Hessian of the identity-augmented objective.

    The block is exactly ``diag(d) + U C U'``: the objective contributes
    the low-rank instrument term (it is linear in the auxiliaries), and
    the multiplier/penalty terms on the price identity contribute the
    diagonal.  Exposing this structure lets the solver eliminate the
    auxiliary block per market instead of treating the extended system as
    dense.
    """
    w = x[N_PARAMS:]
    ew = np.exp(w)
    margin = 1.0 - x[8] * (x[1] + x[2] * ctx.z_r)
    h = margin - ew
    diag = rho * ew ** 2 + (lam - rho * h) * ew
    k_d = ctx.instruments.k_d
    low_rank_core = (2.0 / ctx.n_markets ** 2) * ctx.weight[k_d:, k_d:]
    return diag, ctx.instruments.z_c, low_rank_core
