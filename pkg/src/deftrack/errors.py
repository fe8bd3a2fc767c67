"""Exception types shared across the package."""


class DeftrackError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DeftrackError):
    """Invalid configuration value or inconsistent setup."""


class InvalidParameterError(DeftrackError):
    """Mathematically invalid input (zero quaternion, behind-camera point, ...)."""


class DegenerateGeometryError(DeftrackError):
    """Geometry collapsed below usable precision (zero-length normal, empty mesh)."""


class MatchFileError(DeftrackError):
    """Malformed sparse-match file; message carries the offending line number."""


class NumericsError(DeftrackError):
    """Non-finite value encountered during cost or gradient evaluation."""


class SolverError(DeftrackError):
    """Optimization diverged; carries the partial report when available."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SimulationError(DeftrackError):
    """Particle state became non-finite during simulation."""
