"""Structure-preserving stain color normalization for large histology images.

Fits a per-slide stain model (background intensities, a sparse-NMF stain
color basis, robust density percentiles) from a bounded pixel sample, then
recolors the slide against a target model by streaming row strips in
bounded memory.
"""

from .errors import (
    BlankSlideError,
    CorruptImageError,
    DegenerateStainError,
    InsufficientPixelsError,
    ProfileError,
    SlideNormError,
    StainAbsentError,
    UnsupportedFormatError,
)
from .image_io import (
    ArraySource,
    PixelBlock,
    SlideSource,
    open_slide,
    open_writer,
    plan_strips,
)
from .normalize import (
    FitParams,
    StainStats,
    load_profile,
    normalize_block,
    save_profile,
    scale_factors,
    stain_stats,
)
from .optics import beer_lambert, estimate_max_intensity, inverse_beer_lambert
from .pipeline import BufferGauge, RunStats, SamplePlan, fit, sample_pixels, transform
from .stain_sep import (
    SnmfConfig,
    SnmfFit,
    code_densities,
    fit_basis,
    order_stains,
    reference_basis,
)

__version__ = "0.1.0"

__all__ = [
    "ArraySource",
    "BlankSlideError",
    "BufferGauge",
    "CorruptImageError",
    "DegenerateStainError",
    "FitParams",
    "InsufficientPixelsError",
    "PixelBlock",
    "ProfileError",
    "RunStats",
    "SamplePlan",
    "SlideNormError",
    "SlideSource",
    "SnmfConfig",
    "SnmfFit",
    "StainAbsentError",
    "StainStats",
    "UnsupportedFormatError",
    "beer_lambert",
    "code_densities",
    "estimate_max_intensity",
    "fit",
    "fit_basis",
    "inverse_beer_lambert",
    "load_profile",
    "normalize_block",
    "open_slide",
    "open_writer",
    "order_stains",
    "plan_strips",
    "reference_basis",
    "sample_pixels",
    "save_profile",
    "scale_factors",
    "stain_stats",
    "transform",
]
