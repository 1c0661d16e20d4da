"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class FlexpError(Exception):
    """Base class for all package errors."""


class DimensionError(FlexpError, ValueError):
    """A tensor shape does not match what an operation expects."""


class TapeStateError(FlexpError, RuntimeError):
    """A tape was reused or consumed out of order."""


class NumericError(FlexpError, ArithmeticError):
    """A non-finite value reached an operation that forbids it."""


class InputError(FlexpError, ValueError):
    """An argument is outside its legal range."""


class ProtocolError(FlexpError, RuntimeError):
    """A frame arrived that the receiving runtime cannot accept in its current state."""


class DecodeError(FlexpError, ValueError):
    """A byte string is not a well-formed wire frame."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ConfigError(FlexpError, ValueError):
    """A config file is missing a key, has an unknown key, or a value of the wrong type."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class QuiescenceSignal(FlexpError):
    """Raised by the simulator when asked to advance an empty event queue."""
