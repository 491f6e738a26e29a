# app/errors.py
from typing import Optional


class ShapeError(ValueError):
    """Operands of a graph operation have incompatible shapes."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DataError(ValueError):
    """Dataset contents or layout violate the expected contract."""

    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class OracleAccessError(PermissionError):
    """Target labels were requested where they are sealed or absent."""


class NonFiniteError(RuntimeError):
    """A loss term or gradient became NaN/Inf."""

    def __init__(self, name: str, message: Optional[str] = None):
        super().__init__(message or f"non-finite value in {name}")
        self.name = name
