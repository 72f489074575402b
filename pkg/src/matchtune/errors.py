"""Exception hierarchy shared across the toolkit.

Each class carries the process exit code the CLI maps it to.
"""


class MatchTuneError(Exception):
    exit_code = 1


class ConfigError(MatchTuneError, ValueError):
    """Invalid configuration, unknown keys or inconsistent settings."""


class ParameterError(ConfigError):
    """A numeric parameter is outside its admissible range."""


class ModeError(ConfigError):
    """An operation was requested for a task or label type it does not support."""


class DimensionError(MatchTuneError, ValueError):
    """Shapes of operands do not agree."""


class UsageError(MatchTuneError, RuntimeError):
    pass


class DataError(MatchTuneError, ValueError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(MatchTuneError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    The partial metrics log collected before the failure is kept on the
    exception so callers can still persist it.
    """

    def __init__(self, step, loss, log=None):
        super().__init__(f"numeric divergence at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss
        self.log = list(log) if log is not None else []
