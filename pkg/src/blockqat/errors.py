"""Exception types shared across the package."""


class BlockqatError(Exception):
    """Base class for all blockqat errors."""


class DimensionError(BlockqatError, ValueError):
    """Shapes or extents do not match an operation's contract."""


class DomainError(BlockqatError, ValueError):
    """A value lies outside its documented domain (e.g. integer > 2^N - 1)."""


class NumericError(BlockqatError, ArithmeticError):
    """A computation produced or received non-finite values."""


class DataError(BlockqatError, ValueError):
    """A corpus or calibration set is unusable (empty, too short, ...)."""


class FormatError(BlockqatError, ValueError):
    """A serialized file violates the container or stream format."""


class StateError(BlockqatError, RuntimeError):
    """An object was used in the wrong mode or without required state."""
