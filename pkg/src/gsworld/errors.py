"""Exception hierarchy. Every error raised by the library derives from GsworldError
so the CLI can map failures onto its exit-code contract."""


class GsworldError(Exception):
    """Base class for all library errors."""


class ValidationError(GsworldError):
    """An invariant or precondition was violated (bad data, bad shapes, bad config)."""


class FormatError(GsworldError):
    """A file could not be understood. Subclasses distinguish the failure mode."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """Container version is newer than this library understands."""


class TruncatedFileError(FormatError):
    """File ended in the middle of a chunk or record."""


class NumericError(GsworldError):
    """A numeric procedure failed (divergence, non-finite loss)."""
