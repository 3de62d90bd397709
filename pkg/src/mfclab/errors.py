"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems -> 2,
numerical failures (divergence, nonconvergence, regression trouble) -> 3.
Validation failures are report entries, not exceptions.
"""


class MFCLabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MFCLabError):
    """Inconsistent shapes, grids, or config input."""


class NumericalInputError(MFCLabError):
    """Non-finite values fed into a numerical routine."""


class InvariantViolationError(MFCLabError):
    """A declared model invariant does not hold (e.g. bad LQ weights)."""


class DivergenceError(MFCLabError):
    """A particle state left the admissible range during simulation."""

    def __init__(self, message, particle=None, step=None):
        super().__init__(message)
        self.particle = particle
        self.step = step


class ConvergenceError(MFCLabError):
    """An iterative solver hit its iteration cap before the tolerance."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history) if history is not None else None


class RegressionError(MFCLabError):
    """Least-squares basis is rank deficient for the given sample size."""


class LineSearchError(MFCLabError):
    """Backtracking found no decrease at the minimum step size."""


class InsufficientDataError(MFCLabError):
    """Too few points for the requested fit."""
