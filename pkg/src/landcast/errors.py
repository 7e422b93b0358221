"""Shared exception types."""


class LandcastError(Exception):
    """Base class for all package-specific errors."""


class DataError(LandcastError):
    """Malformed or inconsistent input data (bad CSV row, domain violation)."""


class ConfigError(LandcastError):
    """Invalid run configuration."""


class FitError(LandcastError):
    """A model fit failed (non-convergence, singular design, separation).

    ``payload`` may carry the best iterate found so far and diagnostics.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload
