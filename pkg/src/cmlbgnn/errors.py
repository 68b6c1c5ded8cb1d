class BGNNError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(BGNNError, ValueError):
    pass


class DomainError(BGNNError, ValueError):
    pass


class ConfigError(BGNNError, ValueError):
    pass


class EvaluationError(BGNNError, RuntimeError):
    pass


class SamplingError(BGNNError, ValueError):
    pass


class ParseError(BGNNError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StructureError(BGNNError, ValueError):
    pass


class NumericalError(BGNNError, ArithmeticError):
    pass


class LossError(BGNNError, ValueError):
    pass


class BaselineError(BGNNError, ValueError):
    pass


class TrainingError(BGNNError, RuntimeError):
    pass
