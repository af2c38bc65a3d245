"""Exception hierarchy. Each class carries the CLI exit code for its failure class."""


class GeoFlowError(Exception):
    exit_code = 1


class ConfigError(GeoFlowError, ValueError):
    exit_code = 2


class DataError(GeoFlowError, ValueError):
    exit_code = 3


class NumericalError(GeoFlowError, ArithmeticError):
    exit_code = 4


class AntipodalError(NumericalError):
    """Raised when a geodesic between two points is not unique."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class ConvergenceError(NumericalError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual
