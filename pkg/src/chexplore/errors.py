"""Exception types raised across the package."""


class ChexError(Exception):
    """Base class for every error raised by chexplore."""


class InvalidInputError(ChexError, ValueError):
    """Input data is malformed (non-finite values, empty layers, ...)."""


class InvalidArgumentError(ChexError, ValueError):
    """A scalar argument is outside its valid range."""


class ShapeError(ChexError, ValueError):
    """Array shapes are incompatible."""


class CacheIntegrityError(ChexError):
    """The MRU cache is missing an entry or holds corrupted values."""


class SizeGuardError(ChexError):
    """An exhaustive oracle was asked to enumerate too many subsets."""


class ConfigError(ChexError):
    """Configuration could not be parsed or failed validation.

    ``key`` names the offending configuration key when there is one.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class FormatError(ChexError):
    """A binary dataset file does not follow the IDX layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(ChexError):
    """A checkpoint document is unreadable or corrupted."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint was written by an incompatible format version."""
