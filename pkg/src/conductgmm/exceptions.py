"""Exception types raised by the estimation pipeline."""


class ConductGmmError(Exception):
    """Base class for all package-specific errors."""


class DegenerateSlopeError(ConductGmmError):
    """The composite demand slope alpha1 + alpha2 * z_r is numerically zero."""


class DegenerateDenominatorError(ConductGmmError):
    """A quantity-equation denominator is numerically zero."""


class NoEquilibriumError(ConductGmmError):
    """The parameter/exogenous combination admits no positive equilibrium price."""


class NotUniqueError(ConductGmmError):
    """A unique equilibrium was required but the classification is not Unique."""


class NoBracketError(ConductGmmError):
    """Sign-change bracketing failed; indicates an equilibrium classification bug."""


class NonFiniteError(ConductGmmError):
    """A computed value overflowed or left the representable range."""


class LogDomainError(ConductGmmError):
    """The supply residual's log argument 1 - theta * slope is non-positive."""


class SingularGramError(ConductGmmError):
    """The instrument Gram matrix is singular or too ill-conditioned to invert."""


class NonPositiveMCError(ConductGmmError):
    """A marginal-cost value that must be strictly positive is not."""


class EmptySampleError(ConductGmmError):
    """A statistic was requested over an empty collection."""


class InfeasibleStartError(ConductGmmError):
    """The solver start point violates a strict inequality constraint."""


class ConfigError(ConductGmmError):
    """A configuration document is malformed or carries unknown keys."""


class DatasetFormatError(ConductGmmError):
    """A dataset CSV file does not match the expected schema."""
