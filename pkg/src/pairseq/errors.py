"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code (see ``pairseq.cli``).
"""


class PairseqError(Exception):
    exit_code = 1


class ConfigError(PairseqError, ValueError):
    """Invalid hyperparameters or configuration values."""

    exit_code = 2


class DimensionError(PairseqError, ValueError):
    """Tensor shapes do not agree."""

    exit_code = 2


class DataError(PairseqError, ValueError):
    """Input data violates a structural requirement."""

    exit_code = 3


class InsufficientAtlasError(DataError):
    pass


class StructureError(DataError):
    """Clip tables or runs are malformed."""


class InsufficientDataError(DataError):
    pass


class CapError(DataError):
    def __init__(self, message: str, available: int):
        super().__init__(f"{message} (available: {available})")
        self.available = available


class PoolError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(PairseqError, ArithmeticError):
    """NaN/Inf produced or consumed."""

    exit_code = 4


class BackwardStateError(PairseqError, RuntimeError):
    """backward() called without a recorded forward pass."""

    exit_code = 4
