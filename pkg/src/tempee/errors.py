"""Exception types shared across the package."""

from __future__ import annotations


class TempEEError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TempEEError, ValueError):
    pass


class ConfigError(TempEEError, ValueError):
    pass


class ContractError(TempEEError, ValueError):
    pass


class NumericError(TempEEError, ArithmeticError):
    pass


class RangeError(TempEEError, ValueError):
    pass


class FormatError(TempEEError):
    """Malformed on-disk container. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ScheduleExhausted(TempEEError):
    """Learning-rate schedule queried past its final step."""
