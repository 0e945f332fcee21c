"""Exception hierarchy shared across the toolkit."""


class HeadstrainError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(HeadstrainError):
    """A parameter is outside its documented domain."""


class InvalidDataError(HeadstrainError):
    """Input data violates a structural requirement (non-finite, mismatched lengths, ...)."""


class InsufficientDataError(HeadstrainError):
    """Too few samples or rows for the operation to be defined."""


class IncompatibilityError(HeadstrainError):
    """Two components disagree on a version, layout, or shape contract."""


class NumericError(HeadstrainError):
    """A computation produced non-finite values."""


class TrainingDivergedError(NumericError):
    """Training loss or parameters became non-finite."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class FileFormatError(HeadstrainError):
    """A persisted artifact cannot be read as the format it claims to be."""


class VersionError(FileFormatError):
    """File carries a format version this build does not understand."""


class ChecksumError(FileFormatError):
    """Stored checksum does not match the file content."""


class TruncatedFileError(FileFormatError):
    """File ends before the declared payload is complete."""
