"""Exception hierarchy shared across the package."""


class PipethermError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(PipethermError, ValueError):
    """Invalid pipe geometry (non-positive length, too few grid points, ...)."""


class ConfigurationError(PipethermError, ValueError):
    """Inconsistent model configuration or invalid physical parameters."""


class ParseError(PipethermError, ValueError):
    """Malformed network, scenario, results or measurement file."""

    def __init__(self, message, path=None, location=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if location is not None:
            detail = f"{detail} (at {location})"
        super().__init__(detail)
        self.path = path
        self.location = location


class IntegratorError(PipethermError, RuntimeError):
    """Time integrator failed (singular step matrix, non-finite state)."""


class SpectralError(PipethermError, RuntimeError):
    """A system matrix violates a required spectral property (e.g. not Hurwitz)."""


class ConvergenceError(PipethermError, RuntimeError):
    """An iterative solver failed to converge.

    Carries the iteration count and the last residual so callers can report
    how far the iteration got.
    """

    def __init__(self, message, iterations=None, residual=None):
        if iterations is not None:
            message = f"{message} (iterations={iterations}, residual={residual:.3e})"
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class ProjectionError(PipethermError, RuntimeError):
    """Petrov-Galerkin projection is ill-conditioned or rank deficient."""


class StructuralError(PipethermError, RuntimeError):
    """Network structure makes the requested solve impossible (singular
    Schur complement, disconnected subnetwork, flow reversal)."""


class FitError(PipethermError, RuntimeError):
    """Parameter fit could not produce any admissible trial point."""
