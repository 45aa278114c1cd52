"""Exception hierarchy shared by every module.

Each category maps to its own CLI exit code (see ``hsfs.cli``).
"""


class HsfsError(Exception):
    exit_code = 1


class ShapeError(HsfsError, ValueError):
    exit_code = 3


class NonFiniteError(HsfsError, FloatingPointError):
    exit_code = 6


class FormatError(HsfsError):
    """Base class for binary file format problems."""

    exit_code = 4


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class InconsistentSizeError(FormatError):
    pass


class ValidationError(FormatError, ValueError):
    """Well-formed file holding an illegal value, e.g. a label byte of 3."""


class InfeasibleError(HsfsError):
    exit_code = 5


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss."""
