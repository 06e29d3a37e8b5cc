"""Exception types shared across the package.

Each class maps to one documented CLI exit code; see ``slidenorm.cli``.
"""


class SlideNormError(Exception):
    """Base class for all slidenorm domain errors."""


class UnsupportedFormatError(SlideNormError):
    """The file is not one of the supported image formats."""


class CorruptImageError(SlideNormError):
    """The file looks like a supported format but cannot be decoded."""


class ProfileError(SlideNormError):
    """A stain profile file is missing fields, malformed, or invalid."""


class BlankSlideError(SlideNormError):
    """No non-white pixels were found; the slide has no usable tissue."""


class InsufficientPixelsError(SlideNormError):
    """Too few tissue pixels to fit a stain basis (fewer than 10)."""


class StainAbsentError(SlideNormError):
    """One stain contributes no density at all (single-stain slide)."""


class DegenerateStainError(SlideNormError):
    """A stain's density percentile is zero; scaling would divide by zero."""
