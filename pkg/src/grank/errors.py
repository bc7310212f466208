"""Exception types raised across the package."""


class GRankError(Exception):
    """Base class for all package errors."""


class DimensionError(GRankError, ValueError):
    """Operand shapes are incompatible."""


class MaskError(GRankError, ValueError):
    """An attention row has no admissible target."""


class NonFiniteError(GRankError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class ParseError(GRankError, ValueError):
    """Malformed dataset, config or binary file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(GRankError, ValueError):
    """A record references an item that does not exist."""


class ContractError(GRankError, RuntimeError):
    """A call violated a documented usage contract."""


class ConfigError(GRankError, ValueError):
    """Configuration values are inconsistent with each other or a checkpoint."""
