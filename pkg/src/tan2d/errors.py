"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class Tan2DError(Exception):
    exit_code = 1


class ConfigError(Tan2DError, ValueError):
    exit_code = 2


class DimensionError(Tan2DError, ValueError):
    exit_code = 2


class DataError(Tan2DError, ValueError):
    exit_code = 3


class FormatError(DataError):
    pass


class AnnotationError(DataError):
    pass


class QueryError(DataError):
    pass


class EvalError(DataError):
    pass


class CheckpointError(Tan2DError):
    exit_code = 2


class TrainingError(Tan2DError, ArithmeticError):
    """Non-finite gradient or loss."""

    exit_code = 4
