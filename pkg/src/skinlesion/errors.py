"""Exception types raised across the toolkit."""

from __future__ import annotations


class SkinLesionError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(SkinLesionError, ValueError):
    """An operand had the wrong shape.

    ``expected`` and ``actual`` are kept on the instance so callers (and tests)
    can inspect the mismatch without parsing the message.
    """

    def __init__(self, what: str, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class UnsupportedConfigError(SkinLesionError, ValueError):
    pass


class ValidationError(SkinLesionError, ValueError):
    pass


class EmptyForegroundError(SkinLesionError):
    pass


class EmptyMaskError(SkinLesionError):
    pass


class WeightsFormatError(SkinLesionError):
    pass


class BadMagicError(WeightsFormatError):
    pass


class UnsupportedVersionError(WeightsFormatError):
    pass


class TruncatedFileError(WeightsFormatError):
    pass


class MissingArtifactError(SkinLesionError, FileNotFoundError):
    """A pipeline stage could not find the output of an upstream stage."""

    def __init__(self, path, hint: str = ""):
        self.path = str(path)
        msg = f"missing upstream artifact: {self.path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
