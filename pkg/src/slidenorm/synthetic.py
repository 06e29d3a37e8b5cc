"""Seeded synthetic H&E-like images.

Slides are rendered from the generative model the rest of the package
inverts: draw sparse non-negative stain densities, mix them through the
reference stain basis into optical densities, and expose them as 8-bit
pixels via the inverse Beer-Lambert transform.  Used by the demo, the
benchmark, and the test suite; no external image data is required.

Rendering is chunked deterministically: pixel content depends only on the
seed and the pixel's absolute row, never on how the consumer partitions the
image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image_io import TiffStripWriter
from .optics import inverse_beer_lambert
from .stain_sep import reference_basis

_CHUNK_ROWS = 256


def sparse_densities(n, rng, pure_h=0.4, pure_e=0.4, lo=0.2, hi=2.0):
    """Sparse density pairs: most pixels carry a single stain.

    Returns a (2, n) array; ``pure_h``/``pure_e`` fractions of pixels get
    only hematoxylin or only eosin, the rest a mixture.
    """
    kind = rng.random(n)
    mag = rng.uniform(lo, hi, size=(2, n))
    h = np.zeros((2, n))
    is_h = kind < pure_h
    is_e = (kind >= pure_h) & (kind < pure_h + pure_e)
    mixed = ~(is_h | is_e)
    h[0, is_h] = mag[0, is_h]
    h[1, is_e] = mag[1, is_e]
    h[:, mixed] = mag[:, mixed] * 0.7
    return h


def dense_densities(n, rng, min_h=0.65, max_h=2.0, zero_e=0.3, max_e=1.2):
    """Density pairs with a hematoxylin floor.

    With the reference basis, a floor of 0.65 keeps every rendered channel
    at or below the 220 white threshold, so tissue never contaminates the
    bright-pixel pools used for background estimation.
    """
    h = np.empty((2, n))
    h[0] = rng.uniform(min_h, max_h, size=n)
    h[1] = rng.uniform(0.0, max_e, size=n)
    h[1, rng.random(n) < zero_e] = 0.0
    return h


@dataclass
class RenderedSlide:
    """A rendered synthetic slide plus its generator ground truth."""

    pixels: np.ndarray        # (height, width, 3) uint8
    densities: np.ndarray     # (2, height*width), zero at background
    tissue_mask: np.ndarray   # (height, width) bool
    basis: np.ndarray         # the 3x2 basis used to mix
    i0: np.ndarray            # (3,) background intensities


def _render_rows(width, n_rows, y0, seed, i0, tissue_fraction, layout,
                 density_sampler, size):
    """Render rows [y0, y0+n_rows); content depends only on seed and y0."""
    chunk_index = y0 // _CHUNK_ROWS
    rng = np.random.default_rng([seed, chunk_index])
    n = width * n_rows
    if layout == "scatter":
        tissue = rng.random(n) < tissue_fraction
    elif layout == "block":
        # one solid tissue rectangle anchored at the image center
        full_w, full_h = size
        side = max(1, int(round((tissue_fraction * full_w * full_h) ** 0.5)))
        bx0 = (full_w - side) // 2
        by0 = (full_h - side) // 2
        ys = y0 + np.arange(n_rows)
        row_in = (ys >= by0) & (ys < by0 + side)
        cols_in = np.zeros(width, dtype=bool)
        cols_in[bx0 : bx0 + side] = True
        tissue = (row_in[:, None] & cols_in[None, :]).ravel()
    else:
        raise ValueError(f"unknown layout {layout!r}")
    h = np.zeros((2, n))
    n_tissue = int(tissue.sum())
    if n_tissue:
        h[:, tissue] = density_sampler(n_tissue, rng)
    w = reference_basis()
    od = (w @ h).T.reshape(n_rows, width, 3)
    pixels = inverse_beer_lambert(od, i0)
    return pixels, h, tissue.reshape(n_rows, width)


def render_slide(width, height, seed, *, i0=(255, 255, 255),
                 tissue_fraction=0.6, layout="scatter",
                 density_sampler=sparse_densities) -> RenderedSlide:
    """Render a whole synthetic slide in memory (sizes up to a few MP)."""
    i0 = np.asarray(i0, dtype=np.float64)
    parts = []
    dens = []
    masks = []
    for y in range(0, height, _CHUNK_ROWS):
        rows = min(_CHUNK_ROWS, height - y)
        px, h, mask = _render_rows(width, rows, y, seed, i0, tissue_fraction,
                                   layout, density_sampler, (width, height))
        parts.append(px)
        dens.append(h)
        masks.append(mask)
    return RenderedSlide(
        pixels=np.concatenate(parts),
        densities=np.concatenate(dens, axis=1),
        tissue_mask=np.concatenate(masks),
        basis=reference_basis(),
        i0=i0,
    )


def write_slide_tiff(path, width, height, seed, *, i0=(255, 255, 255),
                     tissue_fraction=0.6, layout="scatter",
                     density_sampler=sparse_densities) -> None:
    """Stream a synthetic slide to a tiled TIFF without holding it in memory."""
    from .image_io import PixelBlock

    i0 = np.asarray(i0, dtype=np.float64)
    with TiffStripWriter(path, width, height) as sink:
        for y in range(0, height, _CHUNK_ROWS):
            rows = min(_CHUNK_ROWS, height - y)
            px, _, _ = _render_rows(width, rows, y, seed, i0, tissue_fraction,
                                    layout, density_sampler, (width, height))
            sink.write_strip(PixelBlock(0, y, px))


def write_demo_images(out_dir, size=768, seed=7):
    """Create the two demo fixtures: a tinted source and a clean target.

    The source has a tinted, slightly dark background and heavier eosin; the
    target is a clean slide with a flat white background.  Returns the two
    paths.
    """
    import os

    from .image_io import PixelBlock, PngStripWriter

    os.makedirs(out_dir, exist_ok=True)
    specs = {
        "source.png": dict(
            i0=(246, 240, 229),
            density_sampler=lambda n, rng: sparse_densities(n, rng, pure_h=0.25,
                                                            pure_e=0.55, hi=1.6),
        ),
        "target.png": dict(
            i0=(255, 255, 255),
            density_sampler=lambda n, rng: sparse_densities(n, rng, pure_h=0.5,
                                                            pure_e=0.3, hi=2.2),
        ),
    }
    paths = []
    for i, (name, kw) in enumerate(specs.items()):
        slide = render_slide(size, size, seed + i, tissue_fraction=0.55, **kw)
        path = os.path.join(out_dir, name)
        with PngStripWriter(path, size, size) as sink:
            sink.write_strip(PixelBlock(0, 0, slide.pixels))
        paths.append(path)
    return paths


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(
        prog="python -m slidenorm.synthetic",
        description="Generate the demo image pair (source.png, target.png).",
    )
    parser.add_argument("out_dir", help="directory for the demo images")
    parser.add_argument("--size", type=int, default=768, help="square edge in pixels")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    for path in write_demo_images(args.out_dir, size=args.size, seed=args.seed):
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
