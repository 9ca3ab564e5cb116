"""Exception hierarchy shared by every module."""


class SparseSubError(Exception):
    """Base class for all library errors."""


class ShapeError(SparseSubError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(SparseSubError, FloatingPointError):
    """A tensor or loss contains NaN or Inf."""


class DecompositionError(SparseSubError, ArithmeticError):
    """Cholesky factorization failed even after the ridge was applied."""

    def __init__(self, message, minor=None):
        super().__init__(message)
        self.minor = minor


class DivergenceError(SparseSubError):
    """Training produced a non-finite loss.

    ``last_good`` holds a ``{name: array}`` snapshot of the parameters from
    the last finite step, so callers can still checkpoint something useful.
    """

    def __init__(self, message, last_good=None, diagnostics=None):
        super().__init__(message)
        self.last_good = last_good or {}
        self.diagnostics = diagnostics or {}


class DataFormatError(SparseSubError, ValueError):
    """Base class for malformed input files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class DimensionMismatchError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class ChecksumError(DataFormatError):
    pass


class NoMissingPixelsError(SparseSubError, ValueError):
    """An error metric over missing pixels was requested but nothing is missing."""
