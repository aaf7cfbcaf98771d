"""Exception hierarchy shared by every layer of the package."""


class UpliftError(Exception):
    """Base class for all package errors."""


class ConfigError(UpliftError, ValueError):
    """Invalid configuration or mismatched shapes."""


class DataError(UpliftError, ValueError):
    """Malformed or inconsistent input data."""


class MetricError(UpliftError, ValueError):
    """A metric cannot be computed on the given inputs."""


class TrainingError(UpliftError, RuntimeError):
    """Training diverged (non-finite loss or parameters)."""


class StateError(UpliftError, RuntimeError):
    """An operation was called in the wrong order, e.g. backward before forward."""
