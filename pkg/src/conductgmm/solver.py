"""Constrained minimization of the moment objective.

One code path serves all three estimator variants:

* ``unconstrained`` runs a limited-memory quasi-Newton descent directly on
  the objective.  Trial points where the supply residual's log argument
  turns non-positive evaluate to +inf and are rejected by the backtracking
  line search, so the iterates roam the region where the objective exists
  (including arbitrarily negative conduct values).
* ``constrained`` wraps the objective in a log-barrier continuation over
  the constraint families (conduct box, demand slope, cost slope,
  existence margins, the strict ones shifted by ``strict_slack``), then
  polishes: rows that are active at the end of the continuation are
  promoted to equalities and resolved with an augmented Lagrangian, which
  pins boundary solutions to machine precision and yields clean KKT
  multipliers.
* ``adhoc-mpec`` adds one auxiliary marginal-cost variable per market tied
  by the price-identity equalities; the equalities are handled by an
  augmented Lagrangian inside the barrier loop.

Every solve is deterministic: no randomness, no wall-clock dependence, and
a shared iteration budget across all phases.
"""

from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np

from . import gmm
from .exceptions import InfeasibleStartError, LogDomainError
from .gmm import MomentContext, build_moment_context
from .model import (
    Dataset,
    EstimatorKind,
    ModelKind,
    ParameterVector,
    SolverConfig,
)

MU_INITIAL = 1e-2
MU_FACTOR = 0.1
MU_FINAL = 1e-9
RHO_INITIAL = 10.0
RHO_FACTOR = 10.0
RHO_MAX = 1e12
EQ_TOL = 1e-9
ACTIVE_THRESHOLD = 1e-5
NONMONOTONE_WINDOW = 10
LBFGS_MEMORY = 10
MAX_BACKTRACKS = 60
ARMIJO_C1 = 1e-4
POLISH_GTOL_FLOOR = 1e-10
POLISH_GTOL_FACTOR = 1e-3
NEWTON_MAX_DIM = 30
FD_HESSIAN_STEP = 1e-7


class Termination(enum.Enum):
    STATIONARY = "stationary"
    MAX_ITERATIONS = "max-iterations"
    INFEASIBLE_START = "infeasible-start"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclasses.dataclass(frozen=True)
class ConstraintReport:
    """Minimum slack of each constraint family; negative means violated.

    The strict families (demand slope, cost slope, existence) are reported
    net of ``strict_slack``; the conduct box is the raw distance to the
    nearer bound.  ``max_equality_violation`` is populated for MPEC runs.
    """

    conduct: float
    demand_slope: float
    cost_slope: float
    existence: float
    max_equality_violation: float | None = None

    @property
    def min_slack(self) -> float:
        return min(self.conduct, self.demand_slope, self.cost_slope, self.existence)

    def is_feasible(self, tol: float = 0.0) -> bool:
        ok = self.min_slack >= -tol
        if self.max_equality_violation is not None:
            ok = ok and self.max_equality_violation <= tol
        return ok


@dataclasses.dataclass(frozen=True)
class TraceRow:
    """One accepted iterate of a solve."""

    iteration: int
    stage: int
    merit: float
    objective: float
    grad_norm: float
    params: tuple[float, ...]
    min_slack: float


@dataclasses.dataclass(frozen=True)
class EstimateResult:
    xi_hat: ParameterVector
    converged: bool
    objective_value: float
    iterations: int
    termination: Termination
    kkt_residual: float
    constraint_report: ConstraintReport
    mc_hat: tuple[float, ...] | None = None
    trace: tuple[TraceRow, ...] | None = None


def check_constraints(
    xi: ParameterVector,
    dataset: Dataset,
    strict_slack: float = 1e-6,
) -> ConstraintReport:
    """Minimum slack of each constraint family over the observed markets.

    The per-market families are affine in the rotation instrument, so only
    its extremes can bind; they are evaluated at every market anyway.
    """
    z_r = np.array([m.exog.z_r for m in dataset.markets])
    s = xi.alpha1 + xi.alpha2 * z_r
    margin = 1.0 - xi.theta * s
    return ConstraintReport(
        conduct=min(xi.theta, 1.0 - xi.theta),
        demand_slope=float(np.min(s)) - strict_slack,
        cost_slope=xi.gamma1 - strict_slack,
        existence=float(np.min(margin)) - strict_slack,
    )


# ---------------------------------------------------------------------------
# Generic NLP machinery
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ConstraintBlock:
    """One vectorized family ``c(x) >= 0`` with a transpose-Jacobian product."""

    name: str
    value: callable
    jt_prod: callable


@dataclasses.dataclass
class NlpResult:
    x: np.ndarray
    objective: float
    kkt_residual: float
    max_violation: float
    iterations: int
    termination: Termination
    converged: bool


def _norm_inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _lbfgs(fun, x0, gtol, max_iter, on_accept=None):
    """Limited-memory quasi-Newton descent with Armijo backtracking.

    ``fun`` returns ``(f, grad)``; a non-finite ``f`` marks the point as
    outside the domain and the line search backtracks past it.  Returns
    ``(x, f, g, n_accepted, status)`` with status in ``{"gtol", "maxiter",
    "stall"}``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not (np.isfinite(f) and g is not None):
        raise InfeasibleStartError("inner start point is outside the domain")
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    n_accepted = 0
    while True:
        gnorm = _norm_inf(g)
        if gnorm <= gtol:
            return x, f, g, n_accepted, "gtol"
        if n_accepted >= max_iter:
            return x, f, g, n_accepted, "maxiter"

        # Two-loop recursion for the search direction.
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for s, y, r, a in zip(s_hist, y_hist, rho_hist, reversed(alphas)):
            b = r * (y @ q)
            q += (a - b) * s
        d = -q
        dg = float(d @ g)
        if not math.isfinite(dg) or dg >= 0.0:
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            d = -g
            dg = -float(g @ g)

        alpha = 1.0 if s_hist else min(1.0, 1.0 / max(1.0, gnorm))
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            x_new = x + alpha * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and g_new is not None and f_new <= f + ARMIJO_C1 * alpha * dg:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return x, f, g, n_accepted, "stall"

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > LBFGS_MEMORY:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        n_accepted += 1
        if on_accept is not None:
            on_accept(x, f, _norm_inf(g))


def _fd_hessian(fun, x, g):
    """Symmetrized forward-difference Hessian of ``fun`` from its gradient.

    Falls back to a backward difference per coordinate when the forward
    point leaves the domain; a coordinate trapped on both sides contributes
    an identity row.
    """
    n = x.shape[0]
    h_mat = np.empty((n, n))
    for j in range(n):
        h = FD_HESSIAN_STEP * max(1.0, abs(x[j]))
        x_step = x.copy()
        x_step[j] += h
        f_j, g_j = fun(x_step)
        if np.isfinite(f_j) and g_j is not None:
            h_mat[:, j] = (g_j - g) / h
            continue
        x_step[j] = x[j] - h
        f_j, g_j = fun(x_step)
        if np.isfinite(f_j) and g_j is not None:
            h_mat[:, j] = (g - g_j) / h
        else:
            h_mat[:, j] = 0.0
            h_mat[j, j] = 1.0
    return 0.5 * (h_mat + h_mat.T)


def _newton(fun, x0, gtol, max_iter, on_accept=None, nonmonotone_window=1):
    """Damped Newton descent with a finite-difference Hessian.

    The Hessian is rebuilt from the analytic gradient each iteration and
    regularized by the smallest multiple-of-identity shift that makes it
    factorizable with a descent direction.  The tiny shift floor leaves
    near-singular curvature directions free to produce very long steps.

    ``nonmonotone_window > 1`` switches the acceptance test from monotone
    Armijo to a reference-envelope rule (sufficient decrease against the
    worst of the last few accepted values), which lets the iterates hop
    over shallow ridges the way filter line searches do.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not (np.isfinite(f) and g is not None):
        raise InfeasibleStartError("inner start point is outside the domain")
    recent = [f]
    n_accepted = 0
    while True:
        gnorm = _norm_inf(g)
        if gnorm <= gtol:
            return x, f, g, n_accepted, "gtol"
        if n_accepted >= max_iter:
            return x, f, g, n_accepted, "maxiter"

        hess = _fd_hessian(fun, x, g)
        eigvals, eigvecs = np.linalg.eigh(hess)
        scale = max(1e-12, float(np.max(np.abs(eigvals))))

        step = None
        if nonmonotone_window > 1 and eigvals[0] < -1e-9 * scale:
            # Filter-style mode: when the model is nonconvex, first try the
            # raw Newton step to the local quadratic's stationary point
            # (saddle-seeking, vetted only against the recent envelope).
            # This is what lets the iterates roam flat compensation valleys
            # instead of settling into the nearest basin.
            lam = np.sign(eigvals) * np.maximum(np.abs(eigvals), 1e-12 * scale)
            d_raw = -(eigvecs @ ((eigvecs.T @ g) / lam))
            if np.all(np.isfinite(d_raw)):
                x_try = x + d_raw
                f_try, g_try = fun(x_try)
                if np.isfinite(f_try) and g_try is not None and f_try <= max(recent):
                    step = (x_try, f_try, g_try)
        if step is None and eigvals[0] < -1e-9 * scale:
            step = _negative_curvature_step(fun, x, f, g, eigvecs[:, 0])
        if step is None:
            tau = max(0.0, -eigvals[0]) + 1e-12 * scale
            d = None
            for _ in range(40):
                cand = -(eigvecs @ ((eigvecs.T @ g) / (eigvals + tau)))
                if np.all(np.isfinite(cand)) and float(cand @ g) < 0.0:
                    d = cand
                    break
                tau = tau * 10.0
            if d is None:
                d = -g
            f_ref = max(recent)
            for direction in (d, -g):
                dg = float(direction @ g)
                if dg >= 0.0:
                    continue
                alpha = 1.0
                for _ in range(MAX_BACKTRACKS):
                    x_new = x + alpha * direction
                    f_new, g_new = fun(x_new)
                    if (np.isfinite(f_new) and g_new is not None
                            and f_new <= f_ref + ARMIJO_C1 * alpha * dg):
                        step = (x_new, f_new, g_new)
                        break
                    alpha *= 0.5
                if step is not None:
                    break
        if step is None:
            return x, f, g, n_accepted, "stall"
        x, f, g = step
        recent.append(f)
        if len(recent) > nonmonotone_window:
            recent.pop(0)
        n_accepted += 1
        if on_accept is not None:
            on_accept(x, f, _norm_inf(g))


def _negative_curvature_step(fun, x, f, g, v):
    """Expanding line search along a direction of negative curvature.

    The direction is signed downhill and the step doubled while the
    objective keeps falling, so the iterates can traverse long, gently
    descending valleys in one move; the search self-terminates where the
    valley curves away from the ray.  Returns an accepted ``(x, f, grad)``
    or None when no strict decrease is found.
    """
    if float(v @ g) > 0.0:
        v = -v
    best = None
    alpha = 1.0
    for _ in range(MAX_BACKTRACKS):
        x_new = x + alpha * v
        f_new, g_new = fun(x_new)
        if np.isfinite(f_new) and g_new is not None and f_new < f:
            best = (x_new, f_new, g_new, alpha)
            break
        alpha *= 0.5
    if best is None:
        return None
    while True:
        alpha = best[3] * 2.0
        x_new = x + alpha * v
        f_new, g_new = fun(x_new)
        if not (np.isfinite(f_new) and g_new is not None and f_new < best[1]):
            break
        best = (x_new, f_new, g_new, alpha)
        if alpha > 1e15:
            break
    return best[0], best[1], best[2]


def _newton_structured(fun, x0, gtol, max_iter, on_accept=None, wblock=None):
    """Newton descent for the extended vector [structural(9), auxiliaries(T)].

    The structural rows of the Hessian come from forward differences of the
    merit gradient (9 extra gradient evaluations); the auxiliary block is
    supplied analytically as ``diag + U C U'`` and eliminated through a
    Schur complement with Woodbury solves, so the per-iteration cost stays
    linear in the number of markets.
    """
    n_struct = gmm.N_PARAMS
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not (np.isfinite(f) and g is not None):
        raise InfeasibleStartError("inner start point is outside the domain")
    n_accepted = 0
    while True:
        gnorm = _norm_inf(g)
        if gnorm <= gtol:
            return x, f, g, n_accepted, "gtol"
        if n_accepted >= max_iter:
            return x, f, g, n_accepted, "maxiter"

        diag, low_u, core = wblock(x)
        floor = 1e-10 * max(1.0, float(np.max(np.abs(diag))))
        diag = np.maximum(diag, floor)

        a_block = np.empty((n_struct, n_struct))
        b_block = np.empty((x.shape[0] - n_struct, n_struct))
        usable = True
        for j in range(n_struct):
            h = FD_HESSIAN_STEP * max(1.0, abs(x[j]))
            x_step = x.copy()
            x_step[j] += h
            f_j, g_j = fun(x_step)
            if not (np.isfinite(f_j) and g_j is not None):
                x_step[j] = x[j] - h
                f_j, g_j = fun(x_step)
                if not (np.isfinite(f_j) and g_j is not None):
                    usable = False
                    break
                g_j = 2.0 * g - g_j
            col = (g_j - g) / h
            a_block[:, j] = col[:n_struct]
            b_block[:, j] = col[n_struct:]

        d = None
        if usable:
            a_block = 0.5 * (a_block + a_block.T)
            inv_diag = 1.0 / diag
            try:
                mid = np.linalg.inv(core) + (low_u.T * inv_diag) @ low_u
                mid_cho = np.linalg.cholesky(mid)
            except np.linalg.LinAlgError:
                mid_cho = None

            def d_solve(v):
                u = v * inv_diag if v.ndim == 1 else v * inv_diag[:, None]
                if mid_cho is None:
                    return u
                t = low_u.T @ u
                t = np.linalg.solve(mid_cho.T, np.linalg.solve(mid_cho, t))
                correction = low_u @ t
                return u - (correction * inv_diag if v.ndim == 1 else correction * inv_diag[:, None])

            g_s, g_w = g[:n_struct], g[n_struct:]
            bd = d_solve(b_block)
            schur = a_block - b_block.T @ bd
            rhs = -g_s + b_block.T @ d_solve(g_w)
            scale = max(1e-12, float(np.max(np.abs(np.diag(schur)))))
            tau = 0.0
            for _ in range(40):
                try:
                    np.linalg.cholesky(schur + tau * np.eye(n_struct))
                    dx = np.linalg.solve(schur + tau * np.eye(n_struct), rhs)
                except np.linalg.LinAlgError:
                    dx = None
                if dx is not None and np.all(np.isfinite(dx)):
                    cand = np.concatenate([dx, d_solve(-g_w - b_block @ dx)])
                    if float(cand @ g) < 0.0:
                        d = cand
                        break
                tau = max(1e-12 * scale, tau * 10.0) if tau > 0.0 else 1e-12 * scale
        if d is None:
            d = -g

        dg = float(d @ g)
        if dg >= 0.0:
            d, dg = -g, -float(g @ g)
        alpha = 1.0
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            x_new = x + alpha * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and g_new is not None and f_new <= f + ARMIJO_C1 * alpha * dg:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return x, f, g, n_accepted, "stall"
        x, f, g = x_new, f_new, g_new
        n_accepted += 1
        if on_accept is not None:
            on_accept(x, f, _norm_inf(g))


def _minimize(fun, x0, gtol, max_iter, on_accept=None, nonmonotone_window=1, wblock=None):
    """Inner solver dispatch: dense Newton for small problems, structured
    Newton when the auxiliary-block Hessian is available, L-BFGS otherwise."""
    if x0.shape[0] <= NEWTON_MAX_DIM:
        return _newton(fun, x0, gtol, max_iter, on_accept, nonmonotone_window)
    if wblock is not None:
        return _newton_structured(fun, x0, gtol, max_iter, on_accept, wblock)
    return _lbfgs(fun, x0, gtol, max_iter, on_accept)


class _ActiveRows:
    """Equality view of selected inequality rows for the polish phase."""

    def __init__(self, block: ConstraintBlock, rows: np.ndarray):
        self.block = block
        self.rows = rows

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.block.value(x)[self.rows]

    def jt_prod(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        full = np.zeros(self.block.value(x).shape[0])
        full[self.rows] = v
        return self.block.jt_prod(x, full)


class _StackedEq:
    """Concatenation of the native equality block and promoted active rows."""

    def __init__(self, native, actives: list[_ActiveRows]):
        self.native = native
        self.actives = actives

    def value(self, x: np.ndarray) -> np.ndarray:
        parts = []
        if self.native is not None:
            parts.append(self.native.value(x))
        parts.extend(a.value(x) for a in self.actives)
        return np.concatenate(parts) if parts else np.zeros(0)

    def jt_prod(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        offset = 0
        if self.native is not None:
            m = self.native.value(x).shape[0]
            out += self.native.jt_prod(x, v[offset:offset + m])
            offset += m
        for a in self.actives:
            m = a.rows.shape[0]
            out += a.jt_prod(x, v[offset:offset + m])
            offset += m
        return out


def solve_nlp(
    fun_grad,
    x0: np.ndarray,
    inequalities: tuple[ConstraintBlock, ...] = (),
    equalities=None,
    config: SolverConfig | None = None,
    on_accept=None,
    nonmonotone_window: int = 1,
    wblock_fn=None,
) -> NlpResult:
    """Local solution of ``min f`` s.t. ``c(x) >= 0`` blockwise, ``h(x) = 0``.

    ``fun_grad(x)`` returns ``(f, grad)``; +inf marks out-of-domain points.
    The start must be strictly feasible for every inequality row.
    ``nonmonotone_window`` relaxes the unconstrained descent's acceptance
    rule (see ``_newton``); constrained phases always accept monotonically
    on their merit function.  ``wblock_fn(x, lam, rho)`` optionally exposes
    the auxiliary-block Hessian structure of extended problems.  The result
    is deterministic given the inputs.
    """
    config = config or SolverConfig()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
        return _solve_nlp(fun_grad, np.array(x0, dtype=float), tuple(inequalities),
                          equalities, config, on_accept, nonmonotone_window, wblock_fn)


def _solve_nlp(fun_grad, x, inequalities, equalities, config, on_accept,
               nonmonotone_window=1, wblock_fn=None) -> NlpResult:
    f0, g0 = fun_grad(x)
    if not (np.isfinite(f0) and g0 is not None):
        raise InfeasibleStartError("objective undefined at the start point")
    for blk in inequalities:
        if np.any(blk.value(x) <= 0.0):
            raise InfeasibleStartError(f"start violates constraint family {blk.name!r}")

    n_rows = sum(blk.value(x).shape[0] for blk in inequalities)
    m_eq = equalities.value(x).shape[0] if equalities is not None else 0

    budget = config.max_iterations
    iterations = 0
    stage = 0
    state = {"mu": MU_INITIAL, "lam": np.zeros(m_eq), "rho": RHO_INITIAL, "obj": f0}

    def merit(z: np.ndarray):
        """Barrier (+ augmented Lagrangian) merit; infeasible points map to +inf."""
        f, g = fun_grad(z)
        if not (np.isfinite(f) and g is not None and np.all(np.isfinite(g))):
            return np.inf, None
        total = f
        grad = np.array(g, dtype=float)
        if inequalities:
            mu_scaled = state["mu"] / n_rows
            for blk in inequalities:
                c = blk.value(z)
                if np.any(c <= 0.0):
                    return np.inf, None
                total -= mu_scaled * float(np.sum(np.log(c)))
                grad += mu_scaled * blk.jt_prod(z, -1.0 / c)
        if equalities is not None:
            h = equalities.value(z)
            total += float(-state["lam"] @ h + 0.5 * state["rho"] * (h @ h))
            grad += equalities.jt_prod(z, state["rho"] * h - state["lam"])
        if not (math.isfinite(total) and np.all(np.isfinite(grad))):
            return np.inf, None
        state["obj"] = f
        return total, grad

    def accept_hook(z, fm, gnorm):
        if on_accept is not None:
            on_accept(z, stage, fm, state["obj"], gnorm)

    stage_cap = max(300, config.max_iterations // 8)

    def run_inner(target, gtol, cap=None, window=1, wblock=None):
        nonlocal x, iterations, stage
        stage += 1
        room = min(cap if cap is not None else stage_cap, budget - iterations)
        if room <= 0:
            return "budget"
        try:
            xs, _, _, used, status = _minimize(target, x, gtol=gtol, max_iter=room,
                                               on_accept=accept_hook,
                                               nonmonotone_window=window,
                                               wblock=wblock)
        except InfeasibleStartError:
            return "stall"
        x = xs
        iterations += used
        return status

    def al_update():
        h = equalities.value(x)
        if _norm_inf(h) <= max(EQ_TOL, min(0.1, state["mu"])):
            state["lam"] = state["lam"] - state["rho"] * h
        else:
            state["rho"] = min(state["rho"] * RHO_FACTOR, RHO_MAX)

    merit_wblock = None
    if wblock_fn is not None:
        def merit_wblock(z):
            return wblock_fn(z, state["lam"], state["rho"])

    # Phase 1: barrier continuation, with multiplier updates when equality
    # constraints are present.  Plain problems go straight to the polish.
    if inequalities or equalities is not None:
        while True:
            gtol_k = max(state["mu"], 0.5 * config.tol_stationarity)
            run_inner(merit, gtol_k, wblock=merit_wblock)
            if equalities is not None:
                al_update()
            if iterations >= budget or state["mu"] <= MU_FINAL:
                break
            state["mu"] = max(MU_FINAL, state["mu"] * MU_FACTOR)
        rounds = 0
        while (
            equalities is not None
            and _norm_inf(equalities.value(x)) > EQ_TOL
            and rounds < 10
            and iterations < budget
        ):
            run_inner(merit, 0.5 * config.tol_stationarity, wblock=merit_wblock)
            al_update()
            rounds += 1

    # Phase 2 (polish): promote rows that finished active to equalities and
    # resolve them with an augmented Lagrangian; remaining rows act as a
    # domain guard.  Rows whose multiplier comes out negative are released.
    banned: set[tuple[int, int]] = set()
    active_views: list[_ActiveRows] = []
    nu_parts: list[np.ndarray] = []
    lam_eq = state["lam"]

    def detect_actives():
        views = []
        for bi, blk in enumerate(inequalities):
            c = blk.value(x)
            rows = np.flatnonzero(c <= ACTIVE_THRESHOLD)
            rows = np.array([r for r in rows if (bi, int(r)) not in banned], dtype=int)
            if rows.size:
                views.append((bi, _ActiveRows(blk, rows)))
        return views

    def make_guarded(open_rows):
        # Rejects points outside the closed feasible set (released rows may
        # sit exactly on their boundary, so the comparison is strict).
        def guarded(z: np.ndarray):
            f, g = fun_grad(z)
            if not (np.isfinite(f) and g is not None and np.all(np.isfinite(g))):
                return np.inf, None
            for bi, blk in enumerate(inequalities):
                c = blk.value(z)
                rows = open_rows.get(bi)
                if rows is not None:
                    c = np.delete(c, rows)
                if c.size and np.any(c < 0.0):
                    return np.inf, None
            state["obj"] = f
            return f, g
        return guarded

    # Polish beyond the convergence tolerance so well-conditioned problems
    # land much closer to the stationary point than the flag requires; the
    # line search stalls out where rounding noise takes over.
    polish_gtol = max(POLISH_GTOL_FLOOR, POLISH_GTOL_FACTOR * config.tol_stationarity)

    for _ in range(4):
        tagged = detect_actives()
        active_views = [view for _, view in tagged]
        tagged_rows = {bi: view.rows for bi, view in tagged}

        if not active_views and equalities is None:
            # Flag-level convergence first (possibly with the non-monotone
            # acceptance rule), then a bounded monotone best-effort pass.
            run_inner(make_guarded({}), config.tol_stationarity, cap=budget,
                      window=nonmonotone_window)
            run_inner(make_guarded({}), polish_gtol, cap=300)
            if not detect_actives():
                nu_parts = []
                lam_eq = np.zeros(0)
                break
            continue

        stacked = _StackedEq(equalities, active_views)
        lam_parts = [state["lam"]] if equalities is not None else []
        for view in active_views:
            c_rows = view.value(x)
            lam_parts.append((MU_FINAL / n_rows) / np.maximum(c_rows, 1e-12))
        lam_comb = np.concatenate(lam_parts) if lam_parts else np.zeros(0)
        rho_p = max(state["rho"], 1e4)
        base_guard = make_guarded(tagged_rows)

        polish_wblock = None
        if wblock_fn is not None:
            def polish_wblock(z):
                return wblock_fn(z, lam_comb[:m_eq], rho_p)

        def al_merit(z: np.ndarray):
            f, g = base_guard(z)
            if not np.isfinite(f):
                return np.inf, None
            h = stacked.value(z)
            total = f + float(-lam_comb @ h + 0.5 * rho_p * (h @ h))
            grad = g + stacked.jt_prod(z, rho_p * h - lam_comb)
            if not (math.isfinite(total) and np.all(np.isfinite(grad))):
                return np.inf, None
            return total, grad

        for _ in range(8):
            run_inner(al_merit, 0.5 * config.tol_stationarity, wblock=polish_wblock)
            h = stacked.value(x)
            lam_comb = lam_comb - rho_p * h
            if _norm_inf(h) <= min(config.tol_constraint, EQ_TOL):
                break
            rho_p = min(rho_p * RHO_FACTOR, RHO_MAX)
            if iterations >= budget:
                break
        # Best-effort final pass; the post-update multiplier estimate makes
        # the reported stationarity equal this pass's merit gradient.
        run_inner(al_merit, polish_gtol, cap=300, wblock=polish_wblock)
        lam_comb = lam_comb - rho_p * stacked.value(x)

        lam_eq = lam_comb[:m_eq] if equalities is not None else np.zeros(0)
        nu_parts = []
        released = False
        offset = m_eq
        for bi, view in tagged:
            nu = lam_comb[offset:offset + view.rows.shape[0]]
            offset += view.rows.shape[0]
            negative = nu < -10.0 * config.tol_stationarity
            if np.any(negative):
                for r in view.rows[negative]:
                    banned.add((bi, int(r)))
                released = True
            nu_parts.append(nu)
        if not released:
            break

    # KKT residual with exact complementarity: multipliers vanish off the
    # active set.
    f_final, g_final = fun_grad(x)
    if not (np.isfinite(f_final) and g_final is not None):
        return NlpResult(
            x=x, objective=np.inf, kkt_residual=np.inf, max_violation=np.inf,
            iterations=iterations, termination=Termination.NUMERICAL_FAILURE,
            converged=False,
        )
    stat = np.array(g_final, dtype=float)
    for view, nu in zip(active_views, nu_parts):
        stat -= view.jt_prod(x, nu)
    if equalities is not None:
        stat -= equalities.jt_prod(x, lam_eq)
    kkt = _norm_inf(stat)

    viol = 0.0
    for blk in inequalities:
        viol = max(viol, max(0.0, -float(np.min(blk.value(x)))))
    if equalities is not None:
        viol = max(viol, _norm_inf(equalities.value(x)))

    # Convergence is judged on the first-order conditions alone; exhausting
    # the budget while over-polishing an already-stationary point is fine.
    converged = kkt <= config.tol_stationarity and viol <= config.tol_constraint
    if converged:
        termination = Termination.STATIONARY
    elif iterations >= budget:
        termination = Termination.MAX_ITERATIONS
    else:
        termination = Termination.NUMERICAL_FAILURE
    return NlpResult(
        x=x, objective=f_final, kkt_residual=kkt, max_violation=viol,
        iterations=iterations, termination=termination, converged=converged,
    )


# ---------------------------------------------------------------------------
# Estimator assembly
# ---------------------------------------------------------------------------

def _objective_fun(ctx: MomentContext):
    def fun(x: np.ndarray):
        try:
            return gmm.objective_gradient_array(x, ctx)
        except (LogDomainError, FloatingPointError):
            return np.inf, None
    return fun


def _mpec_fun(ctx: MomentContext):
    def fun(x: np.ndarray):
        try:
            return gmm.mpec_objective_gradient_array(x, ctx)
        except FloatingPointError:
            return np.inf, None
    return fun


def _constraint_blocks(ctx: MomentContext, slack: float) -> tuple[ConstraintBlock, ...]:
    """Inequality families imposed by the constrained variants.

    The linear model carries only the conduct box (its equilibrium does not
    hinge on the log-domain geometry); the log-linear model adds the slope
    and existence families at every observed market.
    """
    z_r = ctx.z_r

    def conduct_value(x):
        return np.array([x[8], 1.0 - x[8]])

    def conduct_jt(x, v):
        out = np.zeros_like(x)
        out[8] = v[0] - v[1]
        return out

    blocks = [ConstraintBlock("conduct", conduct_value, conduct_jt)]
    if ctx.model is not ModelKind.LOG_LINEAR:
        return tuple(blocks)

    def slope_value(x):
        return x[1] + x[2] * z_r - slack

    def slope_jt(x, v):
        out = np.zeros_like(x)
        out[1] = float(np.sum(v))
        out[2] = float(np.dot(z_r, v))
        return out

    def cost_value(x):
        return np.array([x[5] - slack])

    def cost_jt(x, v):
        out = np.zeros_like(x)
        out[5] = v[0]
        return out

    def existence_value(x):
        return 1.0 - x[8] * (x[1] + x[2] * z_r) - slack

    def existence_jt(x, v):
        s = x[1] + x[2] * z_r
        out = np.zeros_like(x)
        out[1] = -x[8] * float(np.sum(v))
        out[2] = -x[8] * float(np.dot(z_r, v))
        out[8] = -float(np.dot(s, v))
        return out

    blocks += [
        ConstraintBlock("demand-slope", slope_value, slope_jt),
        ConstraintBlock("cost-slope", cost_value, cost_jt),
        ConstraintBlock("existence", existence_value, existence_jt),
    ]
    return tuple(blocks)


class _EqualityBlock:
    """Price-identity equalities for the MPEC variant."""

    def __init__(self, ctx: MomentContext):
        self.ctx = ctx

    def value(self, x: np.ndarray) -> np.ndarray:
        return gmm.mpec_equality_array(x, self.ctx)

    def jt_prod(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return gmm.mpec_equality_jt_prod(x, v, self.ctx)


def _build_report(xi: ParameterVector, dataset: Dataset, slack: float,
                  eq_violation: float | None = None) -> ConstraintReport:
    report = check_constraints(xi, dataset, slack)
    if eq_violation is None:
        return report
    return dataclasses.replace(report, max_equality_violation=eq_violation)


def estimate(
    dataset: Dataset,
    estimator: EstimatorKind,
    config: SolverConfig | None = None,
    *,
    keep_trace: bool = False,
    demand_instruments: tuple[str, ...] | None = None,
    supply_instruments: tuple[str, ...] | None = None,
) -> EstimateResult:
    """Run one estimator variant on a dataset.

    Solver-level failures (infeasible start, stalled line search, iteration
    budget) are reported through the result's termination field rather than
    raised, so Monte Carlo cells can record them and continue.
    """
    config = config or SolverConfig()
    if estimator is EstimatorKind.ADHOC_MPEC and dataset.model is not ModelKind.LOG_LINEAR:
        raise ValueError("the MPEC estimator is defined only for the log-linear model")
    ctx = build_moment_context(dataset, demand_instruments, supply_instruments)
    x0 = config.start.values.to_array()
    slack = config.strict_slack

    trace_rows: list[TraceRow] = []
    counter = {"i": 0}

    def on_accept(z, stage, fm, fobj, gnorm):
        counter["i"] += 1
        if not keep_trace:
            return
        xi_part = ParameterVector.from_array(z[:9])
        report = check_constraints(xi_part, dataset, slack)
        trace_rows.append(TraceRow(
            iteration=counter["i"], stage=stage, merit=fm, objective=fobj,
            grad_norm=gnorm, params=tuple(float(v) for v in z[:9]),
            min_slack=report.min_slack,
        ))

    def failure(termination: Termination) -> EstimateResult:
        xi = ParameterVector.from_array(x0[:9])
        return EstimateResult(
            xi_hat=xi, converged=False, objective_value=math.inf,
            iterations=0, termination=termination, kkt_residual=math.inf,
            constraint_report=_build_report(xi, dataset, slack),
            trace=tuple(trace_rows) if keep_trace else None,
        )

    if estimator is EstimatorKind.UNCONSTRAINED:
        fun = _objective_fun(ctx)
        try:
            res = solve_nlp(fun, x0, (), None, config, on_accept=on_accept,
                            nonmonotone_window=NONMONOTONE_WINDOW)
        except InfeasibleStartError:
            return failure(Termination.INFEASIBLE_START)
        xi_hat = ParameterVector.from_array(res.x)
        return EstimateResult(
            xi_hat=xi_hat, converged=res.converged, objective_value=res.objective,
            iterations=res.iterations, termination=res.termination,
            kkt_residual=res.kkt_residual,
            constraint_report=_build_report(xi_hat, dataset, slack),
            trace=tuple(trace_rows) if keep_trace else None,
        )

    blocks = _constraint_blocks(ctx, slack)

    if estimator is EstimatorKind.CONSTRAINED:
        fun = _objective_fun(ctx)
        try:
            res = solve_nlp(fun, x0, blocks, None, config, on_accept=on_accept)
        except InfeasibleStartError:
            return failure(Termination.INFEASIBLE_START)
        xi_hat = ParameterVector.from_array(res.x)
        return EstimateResult(
            xi_hat=xi_hat, converged=res.converged, objective_value=res.objective,
            iterations=res.iterations, termination=res.termination,
            kkt_residual=res.kkt_residual,
            constraint_report=_build_report(xi_hat, dataset, slack),
            trace=tuple(trace_rows) if keep_trace else None,
        )

    # MPEC: extended vector, price-identity equalities, then a feasibility
    # rounding that snaps the auxiliaries onto the identity exactly.
    fun = _mpec_fun(ctx)
    try:
        x0_ext = gmm.mpec_start_array(x0, ctx)
    except LogDomainError:
        return failure(Termination.INFEASIBLE_START)
    eq = _EqualityBlock(ctx)

    def wblock_fn(z, lam, rho):
        return gmm.mpec_wblock(z, lam, rho, ctx)

    try:
        res = solve_nlp(fun, x0_ext, blocks, eq, config, on_accept=on_accept,
                        wblock_fn=wblock_fn)
    except InfeasibleStartError:
        return failure(Termination.INFEASIBLE_START)

    x_final = res.x
    kkt = res.kkt_residual
    try:
        x_final = gmm.mpec_project_identity(res.x, ctx)
    except LogDomainError:
        pass
    obj_final, _ = gmm.mpec_objective_gradient_array(x_final, ctx)
    eq_violation = _norm_inf(gmm.mpec_equality_array(x_final, ctx))
    xi_hat = ParameterVector.from_array(x_final[:9])
    converged = res.converged and eq_violation <= config.tol_constraint
    return EstimateResult(
        xi_hat=xi_hat, converged=converged, objective_value=obj_final,
        iterations=res.iterations, termination=res.termination,
        kkt_residual=kkt,
        constraint_report=_build_report(xi_hat, dataset, slack, eq_violation),
        mc_hat=tuple(float(v) for v in gmm.mpec_mc_levels(x_final, ctx)),
        trace=tuple(trace_rows) if keep_trace else None,
    )


# ---------------------------------------------------------------------------
# Divergence diagnostics
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DivergenceRow:
    """Compensation diagnostic along an unconstrained trace.

    When the conduct estimate runs to large negative values, the existence
    margin's log grows only logarithmically, so the cost intercept can
    absorb it; tracking ``max_t log(1 - theta * s_t)`` against ``gamma0``
    makes the mechanism visible.
    """

    iteration: int
    theta: float
    gamma0: float
    max_log_margin: float


def diagnose_divergence(trace: tuple[TraceRow, ...], dataset: Dataset) -> list[DivergenceRow]:
    """Per-iterate compensation report for an unconstrained run."""
    z_r = np.array([m.exog.z_r for m in dataset.markets])
    rows = []
    for entry in trace:
        theta = entry.params[8]
        s = entry.params[1] + entry.params[2] * z_r
        margin = 1.0 - theta * s
        max_log = float(np.max(np.log(margin)))
        rows.append(DivergenceRow(
            iteration=entry.iteration, theta=theta,
            gamma0=entry.params[4], max_log_margin=max_log,
        ))
    return rows
