"""Exception types shared across the package."""


class TriangleRiskError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(TriangleRiskError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class AccuracyError(TriangleRiskError, ArithmeticError):
    """A numerical routine could not reach its accuracy target."""


class IngestionError(TriangleRiskError, ValueError):
    """Input data violates the triangle CSV schema or its invariants."""


class FitError(TriangleRiskError, RuntimeError):
    """Base class for estimation failures."""


class NonConvergenceError(FitError):
    """An iterative fit exhausted its iteration budget.

    Carries the last iterate and the final parameter change so callers can
    inspect how close the fit was.
    """

    def __init__(self, message, last_change=None, iterations=None, last_iterate=None):
        super().__init__(message)
        self.last_change = last_change
        self.iterations = iterations
        self.last_iterate = last_iterate


class DegenerateDispersionError(FitError):
    """The dispersion submodel has no information (e.g. a constant triangle)."""


class SingularModelError(FitError):
    """A linear system inside the fit is singular beyond repair."""


class SimulationError(TriangleRiskError, RuntimeError):
    """Scenario generation failed an internal consistency requirement."""


class ConfigError(TriangleRiskError, ValueError):
    """A run configuration file is malformed or inconsistent."""
