"""Domain types shared by every module of the package.

All types are immutable value objects: safe to share across threads and to
use as replication payloads for process pools.
"""

from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np


PARAM_NAMES = (
    "alpha0", "alpha1", "alpha2", "alpha3",
    "gamma0", "gamma1", "gamma2", "gamma3",
    "theta",
)


class ModelKind(enum.Enum):
    """Functional form of the demand / marginal-cost system."""

    LOG_LINEAR = "loglinear"
    LINEAR = "linear"


class EstimatorKind(enum.Enum):
    """Estimator variants compared by the Monte Carlo harness."""

    UNCONSTRAINED = "unconstrained"
    CONSTRAINED = "constrained"
    ADHOC_MPEC = "adhoc-mpec"


def _finite(name: str, value) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


@dataclasses.dataclass(frozen=True)
class ParameterVector:
    """The nine structural parameters of the market model.

    ``alpha0``..``alpha3`` parameterize demand (intercept, slope level,
    rotation interaction, demand-shifter loading); ``gamma0``..``gamma3``
    parameterize marginal cost (intercept, slope, two cost-shifter
    loadings); ``theta`` is the conduct parameter (0 = perfect competition,
    1 = perfect collusion).

    No sign or box restrictions are imposed here: the unconstrained
    estimator must be able to represent arbitrarily negative conduct
    values.  Feasibility with respect to the constraint families is an
    operation on the solver side, not a type invariant.
    """

    alpha0: float
    alpha1: float
    alpha2: float
    alpha3: float
    gamma0: float
    gamma1: float
    gamma2: float
    gamma3: float
    theta: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, _finite(name, getattr(self, name)))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_NAMES),):
            raise ValueError(f"expected {len(PARAM_NAMES)} parameters, got shape {values.shape}")
        return cls(*(float(v) for v in values))

    def replace(self, **changes) -> "ParameterVector":
        return dataclasses.replace(self, **changes)


DEFAULT_TRUE_PARAMS = ParameterVector(
    alpha0=20.0, alpha1=1.0, alpha2=0.1, alpha3=1.0,
    gamma0=5.0, gamma1=1.0, gamma2=1.0, gamma3=1.0,
    theta=0.5,
)
"""Default truth vector used by the synthetic data generator."""


@dataclasses.dataclass(frozen=True)
class MarketExogenous:
    """One market's exogenous draws and error pair.

    For the log-linear model the shifter fields hold logs (``log_y`` is the
    log demand shifter, ``log_w``/``log_r`` log cost shifters, ``log_h``/
    ``log_k`` log excluded instruments).  For the linear model the same
    slots hold levels; the ``Dataset.model`` tag disambiguates.  ``z_r`` is
    the demand rotation instrument in levels under both models.
    """

    log_y: float
    z_r: float
    log_w: float
    log_r: float
    log_h: float
    log_k: float
    eps_d: float
    eps_c: float

    def __post_init__(self):
        for f in dataclasses.fields(self):
            object.__setattr__(self, f.name, _finite(f.name, getattr(self, f.name)))


@dataclasses.dataclass(frozen=True)
class MarketObservation:
    """Exogenous data plus the implied equilibrium outcome.

    ``log_p``/``log_q`` hold log price and log quantity for the log-linear
    model and level price/quantity for the linear model.
    """

    exog: MarketExogenous
    log_p: float
    log_q: float

    def __post_init__(self):
        object.__setattr__(self, "log_p", _finite("log_p", self.log_p))
        object.__setattr__(self, "log_q", _finite("log_q", self.log_q))


@dataclasses.dataclass(frozen=True)
class Dataset:
    """An ordered collection of markets under a single model tag."""

    model: ModelKind
    markets: tuple[MarketObservation, ...]

    def __post_init__(self):
        object.__setattr__(self, "markets", tuple(self.markets))
        if not self.markets:
            raise ValueError("a dataset must contain at least one market")

    def __len__(self) -> int:
        return len(self.markets)

    def __iter__(self):
        return iter(self.markets)


@dataclasses.dataclass(frozen=True)
class StartPoint:
    """Solver start specification: either the DGP truth vector or an explicit point.

    ``from_truths`` start points are re-resolved against the study's truth
    vector by the Monte Carlo harness; explicit ones are used verbatim.
    """

    values: ParameterVector
    from_truths: bool = True

    @classmethod
    def true_values(cls, values: ParameterVector = DEFAULT_TRUE_PARAMS) -> "StartPoint":
        return cls(values=values, from_truths=True)

    @classmethod
    def explicit(cls, values: ParameterVector) -> "StartPoint":
        return cls(values=values, from_truths=False)


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    """Tolerances and limits for the constrained minimization.

    ``strict_slack`` converts the strict inequalities of the constraint
    families into closed ones (``c >= strict_slack``).
    """

    max_iterations: int = 3000
    tol_stationarity: float = 1e-6
    tol_constraint: float = 1e-8
    strict_slack: float = 1e-6
    start: StartPoint = dataclasses.field(default_factory=StartPoint.true_values)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("tol_stationarity", "tol_constraint", "strict_slack"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclasses.dataclass(frozen=True)
class StudyConfig:
    """One Monte Carlo study: a sweep over sample sizes for a fixed cell.

    ``sigma`` may be zero to express the degenerate no-noise limit used by
    exact-recovery checks.
    """

    model: ModelKind
    estimator: EstimatorKind
    sample_sizes: tuple[int, ...]
    sigma: float
    replications: int
    base_seed: int
    solver: SolverConfig = dataclasses.field(default_factory=SolverConfig)

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(int(t) for t in self.sample_sizes))
        if not self.sample_sizes or any(t < 1 for t in self.sample_sizes):
            raise ValueError("sample_sizes must be a nonempty list of positive integers")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")
        if self.base_seed < 0 or self.base_seed > 2**64 - 1:
            raise ValueError("base_seed must fit in 64 unsigned bits")
        if self.estimator is EstimatorKind.ADHOC_MPEC and self.model is not ModelKind.LOG_LINEAR:
            raise ValueError("the MPEC estimator is defined only for the log-linear model")
