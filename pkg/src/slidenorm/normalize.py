"""Density scaling and recombination against a target stain appearance.

A source image is recolored by replacing its stain basis with the target's
while keeping its own relative stain densities: each density row is scaled
so its 99th percentile matches the target's, the scaled densities are
recombined with the target basis, and the result is mapped back to pixels
with the target's background intensities.

The 99th percentile is computed over sub-sampled non-white pixels only,
which rejects dark outliers (via the percentile) and background whites (via
the white threshold) at the same time.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStainError, ProfileError, StainAbsentError
from .optics import inverse_beer_lambert
from .order_stats import median, percentile
from .stain_sep import validate_basis

_STAIN_NAMES = ("hematoxylin", "eosin")
_PROFILE_FORMAT = "slidenorm-profile"
_PROFILE_VERSION = 1


@dataclass(frozen=True)
class StainStats:
    """Robust per-stain density statistics.

    p99 : ndarray, shape (2,)
        99th-percentile density per stain, from non-white pixels.
    sample_count : pixels that contributed.
    """

    p99: np.ndarray
    sample_count: int = 0


@dataclass
class FitParams:
    """Everything learned from one image.

    One FitParams plays the source role and one the target role in a
    transform.  ``provenance`` records the input path and a hash of the
    configuration used, so profiles are traceable.
    """

    i0: np.ndarray
    basis: np.ndarray
    stats: StainStats
    provenance: dict = field(default_factory=dict)


def stain_stats(density_samples=None, patch_p99s=None, sample_count=None) -> StainStats:
    """Aggregate per-stain 99th-percentile densities.

    Two modes:

    * pooled (``density_samples``): a (2, N) array or a pair of per-stain
      collections; each stain's p99 is taken directly.
    * patch (``patch_p99s``): a sequence of per-patch (p99_h, p99_e) pairs;
      the aggregate is the median across patches (an even count averages the
      middle two).  Used when a global sort over a whole slide is infeasible.

    A stain with no samples, or whose densities are all zero, raises
    :class:`StainAbsentError`: the slide effectively carries a single stain.
    """
    if (density_samples is None) == (patch_p99s is None):
        raise ValueError("pass exactly one of density_samples or patch_p99s")

    if patch_p99s is not None:
        pairs = np.asarray(patch_p99s, dtype=np.float64)
        if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] == 0:
            raise ValueError("patch_p99s must be a non-empty sequence of pairs")
        p99 = np.array([median(pairs[:, 0]), median(pairs[:, 1])])
        count = int(sample_count) if sample_count is not None else 0
    else:
        if isinstance(density_samples, np.ndarray) and density_samples.ndim == 2:
            samples = [density_samples[0], density_samples[1]]
        else:
            samples = [np.asarray(s, dtype=np.float64).ravel() for s in density_samples]
        if len(samples) != 2:
            raise ValueError("expected densities for exactly two stains")
        p99 = np.empty(2)
        for j, s in enumerate(samples):
            s = np.asarray(s, dtype=np.float64).ravel()
            if s.size == 0 or float(s.max(initial=0.0)) <= 0.0:
                raise StainAbsentError(
                    f"stain absent: no {_STAIN_NAMES[j]} density observed"
                )
            p99[j] = percentile(s, 99.0)
        count = int(sample_count) if sample_count is not None else int(samples[0].size)

    if not np.all(np.isfinite(p99)) or np.any(p99 < 0):
        raise ValueError(f"p99 must be finite and non-negative, got {p99}")
    return StainStats(p99=p99, sample_count=count)


def scale_factors(source: StainStats, target: StainStats) -> np.ndarray:
    """Per-stain factors that match source p99 densities to the target's."""
    src = np.asarray(source.p99, dtype=np.float64)
    tgt = np.asarray(target.p99, dtype=np.float64)
    for j in range(2):
        if src[j] <= 0.0:
            raise DegenerateStainError(
                f"degenerate stain density: source {_STAIN_NAMES[j]} p99 is zero"
            )
    return tgt / src


def normalize_block(h, factors, target_basis, target_i0, shape) -> np.ndarray:
    """Recombine scaled source densities with the target basis.

    ``V' = W_target @ diag(factors) @ H``, then the inverse Beer-Lambert
    transform with the target's background intensities.  Pure per pixel:
    processing any concatenation of blocks equals concatenating the results.

    Parameters
    ----------
    h : ndarray, shape (2, N)
        Source stain densities, pixels in row-major order.
    factors : array-like, shape (2,), positive.
    target_basis : ndarray, shape (3, 2).
    target_i0 : array-like, shape (3,).
    shape : (height, width) with ``height * width == N``.

    Returns
    -------
    ndarray, shape (height, width, 3), uint8.
    """
    w = validate_basis(target_basis)
    f = np.asarray(factors, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != 2:
        raise ValueError(f"h must be 2xN, got {h.shape}")
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        raise ValueError(f"factors must be positive and finite, got {f}")
    height, width = shape
    n = h.shape[1]
    if height * width != n:
        raise ValueError(f"shape {shape} does not match {n} pixels")
    s0 = f[0] * h[0]
    s1 = f[1] * h[1]
    od = np.empty((n, 3), dtype=np.float64)
    for c in range(3):
        od[:, c] = w[c, 0] * s0 + w[c, 1] * s1
    return inverse_beer_lambert(od.reshape(height, width, 3), target_i0)


def config_hash(config: dict) -> str:
    """Stable hash of a flat config mapping, for profile provenance."""
    canon = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_profile(path, params: FitParams) -> None:
    """Write FitParams as a versioned key = value profile file.

    Floats are written with 17 significant digits, which round-trips
    float64 exactly.
    """
    i0 = np.asarray(params.i0, dtype=np.float64)
    basis = validate_basis(params.basis)
    p99 = np.asarray(params.stats.p99, dtype=np.float64)

    def g(x):
        return format(float(x), ".17g")

    lines = [
        f"format = {_PROFILE_FORMAT}",
        f"version = {_PROFILE_VERSION}",
        f"i0_red = {g(i0[0])}",
        f"i0_green = {g(i0[1])}",
        f"i0_blue = {g(i0[2])}",
    ]
    channels = ("red", "green", "blue")
    for c in range(3):
        for j in range(2):
            lines.append(f"basis_{channels[c]}_{_STAIN_NAMES[j]} = {g(basis[c, j])}")
    lines.append(f"p99_hematoxylin = {g(p99[0])}")
    lines.append(f"p99_eosin = {g(p99[1])}")
    lines.append(f"sample_count = {int(params.stats.sample_count)}")
    for key in sorted(params.provenance):
        lines.append(f"{key} = {params.provenance[key]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_profile(path) -> FitParams:
    """Read a profile written by :func:`save_profile`; validates invariants."""
    fields = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ProfileError(f"{path}:{lineno}: expected 'key = value'")
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
    except OSError as exc:
        raise ProfileError(f"cannot read profile {path}: {exc}") from exc

    if fields.get("format") != _PROFILE_FORMAT:
        raise ProfileError(f"{path}: not a {_PROFILE_FORMAT} file")
    if fields.get("version") != str(_PROFILE_VERSION):
        raise ProfileError(f"{path}: unsupported profile version {fields.get('version')}")

    def f(key):
        try:
            return float(fields[key])
        except (KeyError, ValueError) as exc:
            raise ProfileError(f"{path}: missing or invalid field '{key}'") from exc

    i0 = np.array([f("i0_red"), f("i0_green"), f("i0_blue")])
    if np.any(i0 < 1.0) or np.any(i0 > 255.0):
        raise ProfileError(f"{path}: i0 values out of range [1, 255]")
    channels = ("red", "green", "blue")
    basis = np.empty((3, 2))
    for c in range(3):
        for j in range(2):
            basis[c, j] = f(f"basis_{channels[c]}_{_STAIN_NAMES[j]}")
    try:
        validate_basis(basis)
    except ValueError as exc:
        raise ProfileError(f"{path}: {exc}") from exc
    p99 = np.array([f("p99_hematoxylin"), f("p99_eosin")])
    if np.any(p99 < 0) or not np.all(np.isfinite(p99)):
        raise ProfileError(f"{path}: p99 values must be finite and non-negative")
    count = int(f("sample_count")) if "sample_count" in fields else 0
    known = {
        "format", "version", "i0_red", "i0_green", "i0_blue",
        "p99_hematoxylin", "p99_eosin", "sample_count",
    } | {f"basis_{c}_{s}" for c in channels for s in _STAIN_NAMES}
    provenance = {k: v for k, v in fields.items() if k not in known}
    return FitParams(
        i0=i0,
        basis=basis,
        stats=StainStats(p99=p99, sample_count=count),
        provenance=provenance,
    )
