"""Beer-Lambert transforms and robust background-intensity estimation.

Pixel intensities relate to optical density (OD) through the Beer-Lambert
law ``i = i0 * exp(-v)``, where ``i0`` is the intensity transmitted through
stain-free glass.  A fixed ``i0 = 255`` leaves a color tinge wherever the
slide background is darker or tinted, so ``i0`` is estimated per channel
from bright pixels instead.

All OD arithmetic is float64; pixels are 8-bit.  Every function here is a
pure elementwise map, so blocks can be processed in any partition or order
with bit-identical results.
"""
from __future__ import annotations

import warnings

import numpy as np

from .order_stats import percentile

# Pixels with every channel above this value count as background ("white").
WHITE_THRESHOLD = 220

# At most this many bright samples are kept per channel for i0 estimation.
SAMPLE_CAP = 100_000

# Percentile of the bright-pixel pool used as the per-channel maximum.
_BRIGHT_PERCENTILE = 80.0


class BackgroundEstimateWarning(UserWarning):
    """A channel had no bright pixels; its maximum fell back to 255."""


def estimate_max_intensity(bright_samples) -> np.ndarray:
    """Estimate per-channel background intensity from bright-pixel pools.

    Parameters
    ----------
    bright_samples : sequence of three array-likes
        Per-channel collections of intensities above ``WHITE_THRESHOLD``
        (red, green, blue), each already capped at ``SAMPLE_CAP``.

    Returns
    -------
    numpy.ndarray
        Shape (3,) float64 with the 80th percentile of each pool.  A channel
        with no bright samples falls back to 255.0 and emits a
        ``BackgroundEstimateWarning``: the image has no discernible
        background in that channel.
    """
    if len(bright_samples) != 3:
        raise ValueError("expected three per-channel collections")
    i0 = np.empty(3, dtype=np.float64)
    names = ("red", "green", "blue")
    for c, samples in enumerate(bright_samples):
        a = np.asarray(samples, dtype=np.float64).ravel()
        if a.size == 0:
            warnings.warn(
                f"no pixels brighter than the white threshold in the {names[c]} "
                "channel; falling back to 255",
                BackgroundEstimateWarning,
                stacklevel=2,
            )
            i0[c] = 255.0
        else:
            i0[c] = percentile(a, _BRIGHT_PERCENTILE)
    return i0


def beer_lambert(pixels, i0) -> np.ndarray:
    """Map 8-bit RGB intensities to relative optical densities.

    ``v = ln(i0_c / clamp(i, 1, i0_c))`` per channel.  The lower clamp avoids
    infinite OD at ``i = 0``; the upper clamp keeps OD non-negative where a
    pixel is brighter than the estimated background.

    Parameters
    ----------
    pixels : ndarray, shape (..., 3)
        Intensities in [0, 255], any integer or float dtype.
    i0 : array-like, shape (3,)
        Per-channel maximum intensities, each >= 1.

    Returns
    -------
    ndarray, shape (..., 3), float64, all values finite and >= 0.
    """
    i0 = np.asarray(i0, dtype=np.float64)
    if np.any(i0 < 1.0):
        raise ValueError("i0 components must be >= 1")
    i = np.asarray(pixels, dtype=np.float64)
    np.clip(i, 1.0, i0, out=i)
    return np.log(i0 / i)


def inverse_beer_lambert(od, i0) -> np.ndarray:
    """Map optical densities back to 8-bit intensities.

    ``i = round(i0_c * exp(-v))``, rounded half away from zero, clamped to
    [0, 255].  Exact inverse of :func:`beer_lambert` for integer inputs in
    ``[1, i0_c]``.
    """
    i0 = np.asarray(i0, dtype=np.float64)
    v = np.asarray(od, dtype=np.float64)
    i = i0 * np.exp(-v)
    # values are non-negative, so floor(x + 0.5) rounds half away from zero
    i = np.floor(i + 0.5)
    np.clip(i, 0.0, 255.0, out=i)
    return i.astype(np.uint8)
