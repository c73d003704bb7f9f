"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
``NumericError`` -> 4.
"""


class LidError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LidError):
    pass


class DataError(LidError):
    pass


class ManifestError(DataError):
    """Malformed or inconsistent manifest.  ``lineno`` is 1-based, header = 1."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class UnsupportedFormatError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class DimensionError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class AlignmentError(DataError):
    """Score matrices disagree on utterance ids or language order."""


class NumericError(LidError):
    pass


class ContainerError(DataError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class UnknownKindError(ContainerError):
    pass


class LidWarning(UserWarning):
    """Recoverable numerical or data condition (fallbacks, skipped items)."""
