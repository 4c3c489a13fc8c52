"""Exception hierarchy shared across the package.

CLI exit codes key off these classes: usage/config problems map to 1,
data problems to 2 and numerical failures to 3.
"""


class DualDecodeError(Exception):
    """Base class for all package errors."""


class ConfigError(DualDecodeError, ValueError):
    pass


class DimensionError(DualDecodeError, ValueError):
    pass


class ValidationError(DualDecodeError, ValueError):
    pass


class DataError(DualDecodeError, ValueError):
    pass


class StatsError(DataError):
    pass


class NumericalError(DualDecodeError, ArithmeticError):
    pass


class CheckpointError(DualDecodeError, RuntimeError):
    pass


class MetricError(DualDecodeError, ValueError):
    pass
