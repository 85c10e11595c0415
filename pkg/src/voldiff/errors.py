"""Exception hierarchy shared across the package."""


class VoldiffError(Exception):
    """Base class for all voldiff errors."""


class InvalidParameterError(VoldiffError, ValueError):
    """A camera, config or type invariant was violated."""


class InvalidInputError(VoldiffError, ValueError):
    """Mismatched shapes or inconsistent inputs to an operation."""


class DomainError(VoldiffError, ArithmeticError):
    """Argument outside the mathematical domain of a function."""


class UnsupportedConfigurationError(VoldiffError):
    """The requested mode is not supported by this code path."""


class CorruptFileError(VoldiffError):
    """File contents do not match their declared layout."""


class MissingMetadataError(VoldiffError):
    """A required sidecar or metadata field is absent."""


class NumericalAbortError(VoldiffError):
    """Non-finite values encountered where finiteness is required."""
