"""Exception types shared across the package."""


class HybridMatchError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HybridMatchError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HybridMatchError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(HybridMatchError, ValueError):
    """A layer or model was configured with inconsistent settings."""


class DomainError(HybridMatchError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InvalidStatisticsError(HybridMatchError, ValueError):
    """Normalization statistics are unusable (for example a negative variance)."""


class PatternParseError(HybridMatchError, ValueError):
    def __init__(self, token: str, position: int):
        super().__init__(f"unknown layer token {token!r} at position {position}")
        self.token = token
        self.position = position


class ArchiveError(HybridMatchError, ValueError):
    """A weight archive is corrupt, truncated, or does not fit the model."""


class NumericalError(HybridMatchError, ArithmeticError):
    """A computation produced non-finite values."""
