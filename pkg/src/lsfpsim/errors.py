"""Exception and warning types shared across the package."""


class LsfpsimError(Exception):
    """Base class for all package errors."""


class SpecError(LsfpsimError):
    """Invalid scenario, experiment spec, or configuration input."""


class ConfigurationError(SpecError):
    """An operation was called with missing or inconsistent configuration."""


class NumericError(LsfpsimError):
    """A numerical procedure failed (non-convergence, bad conditioning)."""


class QuadratureError(NumericError):
    """Covariance quadrature did not reach the requested tolerance."""


class ConvergenceError(NumericError):
    """An iterative solver exhausted its iteration budget."""


class SingularityError(NumericError):
    """A matrix that must be invertible is singular or near-singular."""


class PowerControlAnomalyError(NumericError):
    """The distributed power iteration failed to terminate.

    The iteration is guaranteed to converge for any target, so hitting the
    iteration cap indicates a defective SINR evaluator rather than an
    infeasible target; it is surfaced loudly instead of being swallowed.
    """


class NumericWarning(UserWarning):
    """Non-fatal numerical issue (low trial count, weak extrapolation)."""
