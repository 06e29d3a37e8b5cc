"""Shared fixtures and independent oracle implementations.

Oracles here deliberately avoid the package's numerical code paths: they
use Python floats, explicit sorting, and exhaustive case analysis, so a bug
in the library cannot hide in its own test reference.
"""
import math

import numpy as np
import pytest

from slidenorm.image_io import PixelBlock, StripWriter


def percentile_oracle(values, p):
    """Brute-force percentile: explicit sort with linear interpolation
    between closest ranks, zero-based rank = p/100 * (n-1)."""
    a = sorted(float(x) for x in values)
    rank = (p / 100.0) * (len(a) - 1)
    lo = math.floor(rank)
    hi = math.ceil(rank)
    frac = rank - lo
    return a[lo] + (a[hi] - a[lo]) * frac


def median_oracle(values):
    a = sorted(float(x) for x in values)
    mid = len(a) // 2
    if len(a) % 2 == 1:
        return a[mid]
    return (a[mid - 1] + a[mid]) / 2.0


def nn_lasso_oracle(v, w, lam):
    """Brute-force active-set solver for min 1/2||v - Wh||^2 + lam*sum(h),
    h >= 0, with two variables: enumerate every active set, solve the
    restricted problem exactly, and keep the feasible candidate with the
    lowest objective."""
    v = np.asarray(v, float)
    w = np.asarray(w, float)
    g = w.T @ w
    b = w.T @ v

    candidates = [np.zeros(2)]
    for j in (0, 1):
        hj = (b[j] - lam) / g[j, j]
        if hj > 0:
            cand = np.zeros(2)
            cand[j] = hj
            candidates.append(cand)
    det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    if abs(det) > 1e-15:
        rhs = b - lam
        h0 = (g[1, 1] * rhs[0] - g[0, 1] * rhs[1]) / det
        h1 = (g[0, 0] * rhs[1] - g[1, 0] * rhs[0]) / det
        if h0 > 0 and h1 > 0:
            candidates.append(np.array([h0, h1]))

    def objective(h):
        r = v - w @ h
        return 0.5 * float(r @ r) + lam * float(h.sum())

    return min(candidates, key=objective)


def nn_lasso_objective(v, w, h, lam):
    r = np.asarray(v, float) - np.asarray(w, float) @ np.asarray(h, float)
    return 0.5 * float(r @ r) + lam * float(np.sum(h))


def angle_degrees(a, b):
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


class MemoryWriter(StripWriter):
    """Strip writer that collects pixels in memory; for transform tests."""

    def __init__(self, width, height):
        super().__init__(width, height)
        self.pixels = np.zeros((height, width, 3), dtype=np.uint8)

    def _write(self, rows):
        y = self._rows_written
        self.pixels[y : y + rows.shape[0]] = rows

    def close(self):
        if self._rows_written != self.height:
            raise ValueError("incomplete image")
        self._closed = True


@pytest.fixture
def memory_writer():
    return MemoryWriter


def write_png(path, pixels):
    """Encode an array as PNG through an independent encoder (Pillow)."""
    from PIL import Image

    Image.fromarray(pixels, mode="RGB").save(path)
    return path


def make_block(pixels, x=0, y=0):
    return PixelBlock(x, y, np.asarray(pixels, dtype=np.uint8))
