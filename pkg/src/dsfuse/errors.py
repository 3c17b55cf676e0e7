"""Exception hierarchy shared by all modules.

The CLI maps each class to an exit code, so new failure modes should
subclass one of these rather than raising bare ``ValueError``.
"""


class DSFuseError(Exception):
    """Base class for every error raised by the package."""


class UsageError(DSFuseError):
    """Bad arguments or API misuse (stale caches, invalid configs)."""


class DomainError(UsageError, ValueError):
    """A numeric argument lies outside its admissible range."""


class ShapeError(DSFuseError, ValueError):
    """Arrays or volumes with incompatible dimensions."""


class FormatError(DSFuseError):
    """A file on disk is missing, truncated or malformed."""


class NumericalError(DSFuseError, ArithmeticError):
    """Degenerate or non-finite numerics."""


class ConflictError(NumericalError):
    """Dempster combination of totally contradictory evidence."""


class DegenerateInputError(NumericalError):
    """Input with no spread, e.g. standardizing a constant volume."""


class GenerationError(DSFuseError):
    """The phantom generator could not satisfy its configuration."""
