"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration document is malformed or inconsistent."""


class DataError(ValueError):
    """Input data is missing, unparseable, or non-finite."""


class ConvergenceError(RuntimeError):
    """Sampling failed outright (e.g. an all-divergent chain)."""


class NumericalError(RuntimeError):
    """A numerical procedure produced no usable result."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""
