"""Whole-slide orchestration: fit once per slide, then stream the transform.

Fitting never touches more than a bounded sample of the slide: seeded
random patches are visited until enough non-white pixels are collected, so
basis estimation cost grows sub-linearly with slide area.  The transform
streams full-width row strips through a bounded worker pipeline with an
in-order writer, so peak intermediate pixel state is O(workers x strip),
independent of slide height.
"""
from __future__ import annotations

import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from threading import Lock

import numpy as np

from .errors import BlankSlideError, DegenerateStainError, SlideNormError
from .image_io import DEFAULT_STRIP_HEIGHT, PixelBlock, plan_strips
from .normalize import (
    FitParams,
    config_hash,
    normalize_block,
    scale_factors,
    stain_stats,
)
from .optics import SAMPLE_CAP, WHITE_THRESHOLD, beer_lambert, estimate_max_intensity
from .order_stats import percentile
from .stain_sep import SnmfConfig, code_densities, fit_basis

# rows per internal compute chunk; keeps float64 working sets small without
# affecting results (all per-pixel stages are pure)
_CHUNK_ROWS = 64


@dataclass(frozen=True)
class SamplePlan:
    """How to gather the fitting sample from a slide."""

    max_patches: int = 20
    patch_size: int = 1000
    target_pixels: int = 100_000
    background_fraction_cutoff: float = 0.95
    seed: int = 0
    white_threshold: int = WHITE_THRESHOLD
    sample_cap: int = SAMPLE_CAP

    def __post_init__(self):
        if self.max_patches < 1:
            raise ValueError("max_patches must be >= 1")
        if self.target_pixels < 1:
            raise ValueError("target_pixels must be >= 1")
        if not 0.0 < self.background_fraction_cutoff <= 1.0:
            raise ValueError("background_fraction_cutoff must be in (0, 1]")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


@dataclass
class PixelSample:
    """Pixels gathered by :func:`sample_pixels`."""

    non_white: np.ndarray          # (M, 3) uint8, RGB of non-white pixels
    patch_counts: list             # non-white pixels contributed per used patch
    bright: tuple                  # three 1-D arrays of bright channel values
    patches_visited: int = 0
    patches_used: int = 0


@dataclass
class RunStats:
    """Per-stage wall times and counters for one fit/transform run."""

    sampling_s: float = 0.0
    basis_fit_s: float = 0.0
    transform_s: float = 0.0
    total_s: float = 0.0
    sampled_pixels: int = 0
    transformed_pixels: int = 0
    patches: int = 0
    peak_strip_pixels: int = 0

    CSV_HEADER = "stage,seconds,pixels,patches"

    def csv_rows(self):
        return [
            ("sampling", self.sampling_s, self.sampled_pixels, self.patches),
            ("basis_fit", self.basis_fit_s, self.sampled_pixels, self.patches),
            ("transform", self.transform_s, self.transformed_pixels, self.patches),
            ("total", self.total_s, self.transformed_pixels, self.patches),
        ]

    def write_csv(self, fh):
        fh.write(self.CSV_HEADER + "\n")
        for stage, seconds, pixels, patches in self.csv_rows():
            fh.write(f"{stage},{seconds:.6f},{pixels},{patches}\n")


class BufferGauge:
    """Thread-safe gauge of pixels held in in-flight strip buffers."""

    def __init__(self):
        self._lock = Lock()
        self.current = 0
        self.peak = 0

    def add(self, pixels: int):
        with self._lock:
            self.current += pixels
            if self.current > self.peak:
                self.peak = self.current

    def release(self, pixels: int):
        with self._lock:
            self.current -= pixels


def _stage(label, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SlideNormError as exc:
        raise type(exc)(f"{label}: {exc}") from exc


def sample_pixels(slide, plan: SamplePlan = SamplePlan()) -> PixelSample:
    """Gather non-white and bright pixels from seeded random patches.

    Patches are visited in a seeded shuffle of a coarse grid until either
    ``target_pixels`` non-white pixels are collected or ``max_patches``
    non-background patches have been used.  A patch that is almost entirely
    white counts as background: it contributes bright pixels but not toward
    ``max_patches``, and a hard limit of 10x max_patches visits bounds the
    search on nearly empty slides.  Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(plan.seed)
    xs = range(0, slide.width, plan.patch_size)
    ys = range(0, slide.height, plan.patch_size)
    origins = [(x, y) for y in ys for x in xs]
    order = rng.permutation(len(origins))

    hard_limit = 10 * plan.max_patches
    min_tissue_fraction = 1.0 - plan.background_fraction_cutoff
    thr = plan.white_threshold

    chunks = []
    counts = []
    bright = [[], [], []]
    bright_n = [0, 0, 0]
    collected = 0
    visited = 0
    used = 0

    for idx in order:
        if visited >= hard_limit or used >= plan.max_patches:
            break
        if collected >= plan.target_pixels:
            break
        x, y = origins[idx]
        w = min(plan.patch_size, slide.width - x)
        h = min(plan.patch_size, slide.height - y)
        px = slide.read_region(x, y, w, h).pixels.reshape(-1, 3)
        visited += 1

        for c in range(3):
            if bright_n[c] < plan.sample_cap:
                vals = px[:, c]
                vals = vals[vals > thr]
                take = vals[: plan.sample_cap - bright_n[c]]
                if take.size:
                    bright[c].append(take)
                    bright_n[c] += take.size

        non_white = ~np.all(px > thr, axis=1)
        n_non_white = int(non_white.sum())
        if n_non_white < min_tissue_fraction * px.shape[0]:
            continue  # background patch
        used += 1
        take = px[non_white][: plan.target_pixels - collected]
        chunks.append(take)
        counts.append(take.shape[0])
        collected += take.shape[0]

    if collected == 0:
        raise BlankSlideError(
            "blank slide: no non-white pixels found in any sampled patch"
        )
    non_white = np.concatenate(chunks)
    bright_arrays = tuple(
        np.concatenate(b) if b else np.empty(0, dtype=np.uint8) for b in bright
    )
    return PixelSample(
        non_white=non_white,
        patch_counts=counts,
        bright=bright_arrays,
        patches_visited=visited,
        patches_used=used,
    )


def fit(slide, plan: SamplePlan = SamplePlan(), cfg: SnmfConfig = SnmfConfig(), *,
        code_lam: float = 0.0, per_patch_stats: bool = False,
        source_label: str = "", stats: RunStats | None = None) -> FitParams:
    """Learn FitParams (background, basis, density stats) for one slide.

    The basis is fitted once, on the pooled sample, so stain colors stay
    consistent across the whole slide.  Density percentiles are taken over
    the pooled sample by default; ``per_patch_stats`` switches to the median
    of per-patch 99th percentiles instead.  Deterministic for fixed seeds.
    """
    stats = stats if stats is not None else RunStats()

    t0 = time.perf_counter()
    sample = _stage("sampling", sample_pixels, slide, plan)
    stats.sampling_s += time.perf_counter() - t0
    stats.sampled_pixels = sample.non_white.shape[0]
    stats.patches = sample.patches_used

    t0 = time.perf_counter()
    i0 = _stage("background estimation", estimate_max_intensity, sample.bright)
    od = beer_lambert(sample.non_white, i0)
    v = np.ascontiguousarray(od.T)
    snmf = _stage("basis fit", fit_basis, v, cfg)
    h = code_densities(v, snmf.basis, code_lam)
    if per_patch_stats:
        pairs = []
        start = 0
        for count in sample.patch_counts:
            part = h[:, start : start + count]
            if part.shape[1]:
                pairs.append((percentile(part[0], 99.0), percentile(part[1], 99.0)))
            start += count
        st = _stage("density stats", stain_stats, patch_p99s=pairs,
                    sample_count=h.shape[1])
    else:
        st = _stage("density stats", stain_stats, h)
    stats.basis_fit_s += time.perf_counter() - t0

    cfg_fields = {
        "lambda": cfg.lam,
        "code_lambda": code_lam,
        "rel_tol": cfg.rel_tol,
        "max_outer_iters": cfg.max_outer_iters,
        "snmf_seed": cfg.seed,
        "sample_seed": plan.seed,
        "white_threshold": plan.white_threshold,
        "sample_cap": plan.sample_cap,
        "target_pixels": plan.target_pixels,
        "max_patches": plan.max_patches,
        "patch_size": plan.patch_size,
        "background_fraction_cutoff": plan.background_fraction_cutoff,
        "per_patch_stats": per_patch_stats,
    }
    provenance = {"source": str(source_label), "config_hash": config_hash(cfg_fields)}
    return FitParams(i0=i0, basis=snmf.basis, stats=st, provenance=provenance)


def _process_strip(pixels, src_i0, src_basis, code_lam, factors, tgt_basis, tgt_i0):
    """Recolor one strip.  Pure: output depends only on pixel values."""
    h_rows, width = pixels.shape[:2]
    out = np.empty_like(pixels)
    for y in range(0, h_rows, _CHUNK_ROWS):
        rows = min(_CHUNK_ROWS, h_rows - y)
        od = beer_lambert(pixels[y : y + rows], src_i0)
        v = np.ascontiguousarray(od.reshape(-1, 3).T)
        dens = code_densities(v, src_basis, code_lam)
        out[y : y + rows] = normalize_block(
            dens, factors, tgt_basis, tgt_i0, (rows, width)
        )
    return out


def transform(slide, source: FitParams, target: FitParams, sink, *,
              strip_height: int = DEFAULT_STRIP_HEIGHT, workers: int | None = None,
              code_lam: float = 0.0, stats: RunStats | None = None,
              gauge: BufferGauge | None = None, progress=None) -> RunStats:
    """Stream the full normalization over a slide, strip by strip.

    Every strip runs read -> Beer-Lambert (source i0) -> density coding
    (source basis) -> rescale and recombine (target basis, target i0) ->
    write.  Strips are computed by a pool of workers but committed in input
    order, with at most ``workers`` strips in flight, so intermediate pixel
    state is bounded by workers x strip_height x width regardless of slide
    height.  Output is bit-identical for any strip_height and worker count.
    """
    stats = stats if stats is not None else RunStats()
    gauge = gauge if gauge is not None else BufferGauge()
    workers = workers if workers else (os.cpu_count() or 1)
    factors = scale_factors(source.stats, target.stats)
    if np.any(factors <= 0):
        # source percentiles are validated by scale_factors; a zero factor
        # can only come from a zero target percentile
        raise DegenerateStainError(
            "degenerate stain density: target p99 is zero for a stain"
        )
    strips = plan_strips(slide.height, strip_height)
    width = slide.width

    t0 = time.perf_counter()
    pending = deque()

    def commit():
        future, y, h = pending.popleft()
        sink.write_strip(PixelBlock(0, y, future.result()))
        gauge.release(h * width)
        if progress is not None:
            progress(y + h, slide.height)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        try:
            for y, h in strips:
                while len(pending) >= workers:
                    commit()
                block = slide.read_region(0, y, width, h)
                gauge.add(h * width)
                pending.append(
                    (
                        pool.submit(
                            _process_strip,
                            block.pixels,
                            source.i0,
                            source.basis,
                            code_lam,
                            factors,
                            target.basis,
                            target.i0,
                        ),
                        y,
                        h,
                    )
                )
            while pending:
                commit()
        except BaseException:
            for future, _, _ in pending:
                future.cancel()
            raise

    stats.transform_s += time.perf_counter() - t0
    stats.transformed_pixels = slide.width * slide.height
    stats.peak_strip_pixels = max(stats.peak_strip_pixels, gauge.peak)
    stats.total_s = stats.sampling_s + stats.basis_fit_s + stats.transform_s
    return stats
