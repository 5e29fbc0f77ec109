"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class AttnMixerError(Exception):
    exit_code = 1


class ConfigError(AttnMixerError, ValueError):
    exit_code = 2


class DataError(AttnMixerError, ValueError):
    exit_code = 3


class TrainingDivergenceError(AttnMixerError, RuntimeError):
    exit_code = 4

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class StorageError(AttnMixerError, OSError):
    exit_code = 5


# autodiff

class ShapeError(ConfigError):
    """Operand shapes do not conform."""


class RankError(ShapeError):
    pass


class NumericInputError(AttnMixerError, ValueError):
    """NaN or Inf where finite values are required."""


class DomainError(AttnMixerError, ValueError):
    """Argument outside the function's domain (e.g. log of a non-positive entry)."""


# data-io

class MissingFileError(StorageError, FileNotFoundError):
    pass


class MalformedRowError(DataError):
    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class MonotonicityError(DataError):
    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class SpecError(ConfigError):
    """Synthetic generator spec violates its invariants."""


class CheckpointVersionError(ConfigError):
    pass


class CheckpointShapeError(ConfigError):
    pass


# eval

class RSquaredUndefinedError(DataError):
    """Truth has zero variance. RMSE and MAE are still attached."""

    def __init__(self, rmse, mae, n):
        self.rmse = rmse
        self.mae = mae
        self.n = n
        super().__init__("R^2 undefined: target has zero variance")


class SolverError(AttnMixerError, ArithmeticError):
    exit_code = 3
