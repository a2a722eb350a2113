class TilcError(Exception):
    """Base class for package errors."""


class ConfigError(TilcError, ValueError):
    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class InvalidConfigurationError(TilcError, ValueError):
    pass


class DegenerateSpeedError(TilcError, ZeroDivisionError):
    """Slip is undefined when both chassis and wheel speed are zero."""


class NumericalDivergenceError(TilcError, FloatingPointError):
    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class ModelInvalidError(TilcError):
    """Prediction model cannot be built (speed below the validity threshold)."""


class SolverFailureError(TilcError):
    def __init__(self, message, iterations=0):
        super().__init__(message)
        self.iterations = iterations


class UndefinedCostError(TilcError, ValueError):
    pass


class FitError(TilcError, ValueError):
    pass


class UndefinedSnrError(TilcError, ValueError):
    pass
