"""Exception types shared across the package.

The CLI maps :class:`NumericalError` to exit code 1 and every other
:class:`TMError` (plus ``OSError``) to exit code 2.
"""


class TMError(Exception):
    """Base class for package errors."""


class ValidationError(TMError, ValueError):
    """Input data or configuration violates a precondition."""


class ParseError(ValidationError):
    """A trace or matrix file could not be parsed."""


class CheckpointError(ValidationError):
    """A checkpoint is corrupt or does not match the requested config."""


class NumericalError(TMError, ArithmeticError):
    """Training or sampling produced non-finite values."""
