"""Exception types shared across the package."""


class MilError(Exception):
    """Base class for every error raised on purpose by milpool."""


class DimensionError(MilError, ValueError):
    pass


class DomainError(MilError, ValueError):
    pass


class NumericError(MilError, ArithmeticError):
    pass


class ParameterError(MilError, ValueError):
    pass


class InputError(MilError, ValueError):
    pass


class SpecError(MilError, ValueError):
    pass


class LoadError(MilError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(MilError, RuntimeError):
    """Training diverged; ``history`` holds every finite epoch recorded so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
