"""Exceptions de certvote. Chaque famille porte son code de sortie CLI."""


class CertvoteError(Exception):
    exit_code = 1


class ConfigError(CertvoteError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    pass


class DomainError(ParameterError):
    pass


class LayerIndexError(ConfigError, IndexError):
    pass


class DataError(CertvoteError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class FormatError(DataError):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class ConsistencyError(DataError):
    pass


class PartitionSizeError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class InsufficientExamplesError(DataError):
    pass


class NumericError(CertvoteError, ArithmeticError):
    exit_code = 4


class UndefinedMetricError(NumericError):
    pass


class DivergenceError(NumericError):
    pass


class StageError(CertvoteError):
    """Échec d'une étape du pipeline ; garde le code de sortie de la cause."""

    def __init__(self, stage, cause):
        super().__init__(f"étape '{stage}' : {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
