"""Order statistics used throughout the package.

One percentile definition is used everywhere: linear interpolation between
closest ranks on the sorted sample, with zero-based rank ``p/100 * (n - 1)``.
"""
from __future__ import annotations

import numpy as np


def percentile(values, p: float) -> float:
    """Percentile of ``values`` by linear interpolation between closest ranks.

    Parameters
    ----------
    values : array-like
        Non-empty 1-D collection of finite numbers.
    p : float
        Percentile in [0, 100].

    Returns
    -------
    float
        ``sorted(values)[rank]`` with ``rank = p/100 * (n-1)`` and linear
        interpolation at fractional ranks.
    """
    a = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("percentile of an empty collection")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentile p must be in [0, 100], got {p}")
    rank = (p / 100.0) * (a.size - 1)
    lo = int(np.floor(rank))
    hi = int(np.ceil(rank))
    frac = rank - lo
    return float(a[lo] + (a[hi] - a[lo]) * frac)


def median(values) -> float:
    """Median; an even count averages the two middle values."""
    a = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("median of an empty collection")
    mid = a.size // 2
    if a.size % 2 == 1:
        return float(a[mid])
    return float((a[mid - 1] + a[mid]) / 2.0)
