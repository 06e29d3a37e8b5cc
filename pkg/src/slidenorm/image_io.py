"""Random-access tiled reading and streamed strip writing of RGB images.

Slides are exposed through :class:`SlideSource`, which hides the container
format behind ``read_region``.  Supported inputs are PNG, flat TIFF, and
tiled or striped (Big)TIFF with 8-bit RGB samples; for pyramidal TIFFs only
the highest-resolution level is exposed.  TIFF regions are assembled from
individual decoded tiles or strips, so reading a region never materializes
the whole image.

Output is written top to bottom in full-width strips through a
:class:`StripWriter`; the PNG writer streams scanlines through a zlib
compressor and the TIFF writer re-chunks strips into 256x256 tiles, so
writer memory stays bounded regardless of image height.
"""
from __future__ import annotations

import math
import queue
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np
import tifffile
from PIL import Image, UnidentifiedImageError

from .errors import CorruptImageError, UnsupportedFormatError

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_TIFF_MAGICS = (b"II*\x00", b"MM\x00*", b"II+\x00", b"MM\x00+")

# TIFF compression tags decodable without optional codec libraries
_SUPPORTED_TIFF_COMPRESSION = {1, 8, 32946}  # none, adobe-deflate, deflate

DEFAULT_STRIP_HEIGHT = 1024
_TILE = 256


@dataclass
class PixelBlock:
    """A rectangular tile of 8-bit RGB pixels and its position in the slide."""

    origin_x: int
    origin_y: int
    pixels: np.ndarray  # (height, width, 3) uint8, row-major

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError(f"pixels must be (h, w, 3) uint8, got {p.shape} {p.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


class SlideSource:
    """Read-only random access to an RGB image of known size.

    Sources are immutable during a run: two reads of the same region are
    byte-identical.  ``read_region`` must be safe to call from multiple
    threads.
    """

    width: int
    height: int

    def read_region(self, x: int, y: int, w: int, h: int) -> PixelBlock:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def _check_bounds(self, x, y, w, h):
        if w < 1 or h < 1:
            raise ValueError(f"region size must be positive, got {w}x{h}")
        if x < 0 or y < 0 or x + w > self.width or y + h > self.height:
            raise ValueError(
                f"region ({x},{y},{w},{h}) outside image {self.width}x{self.height}"
            )


class ArraySource(SlideSource):
    """In-memory slide; used by the synthetic generator and tests."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise ValueError("ArraySource expects (h, w, 3) uint8")
        self._pixels = pixels
        self.height, self.width = pixels.shape[:2]

    def read_region(self, x, y, w, h):
        self._check_bounds(x, y, w, h)
        return PixelBlock(x, y, self._pixels[y : y + h, x : x + w].copy())


class PngSource(SlideSource):
    """PNG input.  PNG has no random access, so it is decoded once."""

    def __init__(self, path):
        try:
            with Image.open(path) as img:
                if img.mode != "RGB":
                    raise UnsupportedFormatError(
                        f"{path}: only 8-bit RGB PNG is supported, mode is {img.mode}"
                    )
                self._pixels = np.asarray(img, dtype=np.uint8)
        except UnidentifiedImageError as exc:
            raise CorruptImageError(f"{path}: cannot decode PNG: {exc}") from exc
        except (OSError, SyntaxError, ValueError) as exc:
            raise CorruptImageError(f"{path}: truncated or corrupt PNG: {exc}") from exc
        self.height, self.width = self._pixels.shape[:2]

    def read_region(self, x, y, w, h):
        self._check_bounds(x, y, w, h)
        return PixelBlock(x, y, self._pixels[y : y + h, x : x + w].copy())


class TiffSource(SlideSource):
    """Tiled or striped (Big)TIFF input with per-segment decoding.

    Only the tiles or strips intersecting a requested region are read and
    decoded.  For pyramidal files, level 0 (highest resolution) is used.
    """

    def __init__(self, path):
        self._path = path
        try:
            self._tif = tifffile.TiffFile(path)
        except (tifffile.TiffFileError, OSError, ValueError) as exc:
            raise CorruptImageError(f"{path}: cannot open TIFF: {exc}") from exc
        try:
            series = self._tif.series[0]
            level = series.levels[0] if getattr(series, "levels", None) else series
            self._page = level.pages[0]
        except (IndexError, AttributeError) as exc:
            self._tif.close()
            raise CorruptImageError(f"{path}: no readable image in TIFF") from exc
        page = self._page
        if (
            page.samplesperpixel != 3
            or page.dtype != np.uint8
            or getattr(page, "planarconfig", 1) not in (1, None)
        ):
            self._tif.close()
            raise UnsupportedFormatError(
                f"{path}: only 8-bit interleaved RGB TIFF is supported"
            )
        if int(page.compression) not in _SUPPORTED_TIFF_COMPRESSION:
            self._tif.close()
            raise UnsupportedFormatError(
                f"{path}: unsupported TIFF compression {page.compression!r}"
            )
        self.width = page.imagewidth
        self.height = page.imagelength
        if page.is_tiled:
            self._seg_h, self._seg_w = page.tilelength, page.tilewidth
            self._cols = math.ceil(self.width / self._seg_w)
        else:
            self._seg_h = page.rowsperstrip or self.height
            self._seg_w = self.width
            self._cols = 1
        if len(page.dataoffsets) < math.ceil(self.height / self._seg_h) * self._cols:
            self._tif.close()
            raise CorruptImageError(f"{path}: truncated TIFF: missing segments")
        self._lock = threading.Lock()
        # prime the decoder now: validates the file and avoids a lazy-init
        # race when regions are read from multiple threads
        try:
            self._read_segment(0)
        except CorruptImageError:
            self._tif.close()
            raise

    def close(self):
        self._tif.close()

    def _read_segment(self, index):
        offset = self._page.dataoffsets[index]
        nbytes = self._page.databytecounts[index]
        fh = self._tif.filehandle
        with self._lock:
            fh.seek(offset)
            data = fh.read(nbytes)
        if len(data) != nbytes:
            raise CorruptImageError(f"{self._path}: truncated segment {index}")
        try:
            segment, _, _ = self._page.decode(data, index)
        except Exception as exc:
            raise CorruptImageError(
                f"{self._path}: cannot decode segment {index}: {exc}"
            ) from exc
        return segment[0]  # (seg_h, seg_w, 3), edge segments padded

    def read_region(self, x, y, w, h):
        self._check_bounds(x, y, w, h)
        out = np.empty((h, w, 3), dtype=np.uint8)
        row0 = y // self._seg_h
        row1 = (y + h - 1) // self._seg_h
        col0 = x // self._seg_w
        col1 = (x + w - 1) // self._seg_w
        for r in range(row0, row1 + 1):
            sy = r * self._seg_h
            for c in range(col0, col1 + 1):
                sx = c * self._seg_w
                seg = self._read_segment(r * self._cols + c)
                y_lo = max(y, sy)
                y_hi = min(y + h, sy + self._seg_h)
                x_lo = max(x, sx)
                x_hi = min(x + w, sx + self._seg_w)
                out[y_lo - y : y_hi - y, x_lo - x : x_hi - x] = seg[
                    y_lo - sy : y_hi - sy, x_lo - sx : x_hi - sx
                ]
        return PixelBlock(x, y, out)


def open_slide(path) -> SlideSource:
    """Open an image as a SlideSource, dispatching on the file's magic bytes.

    Raises :class:`UnsupportedFormatError` for unknown or unsupported
    formats and :class:`CorruptImageError` for files that declare a
    supported format but cannot be decoded.
    """
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == _PNG_SIGNATURE:
        return PngSource(path)
    if magic[:4] in _TIFF_MAGICS:
        return TiffSource(path)
    raise UnsupportedFormatError(
        f"{path}: not a supported image format (PNG or 8-bit RGB TIFF)"
    )


def plan_strips(height: int, strip_height: int):
    """Tile [0, height) into full-width strips of at most strip_height rows.

    Returns an ordered list of (origin_y, height) pairs covering the image
    exactly, with no overlap and no gap; the last strip may be shorter.
    """
    if strip_height < 1:
        raise ValueError(f"strip_height must be >= 1, got {strip_height}")
    if height < 1:
        raise ValueError(f"height must be >= 1, got {height}")
    return [(y, min(strip_height, height - y)) for y in range(0, height, strip_height)]


class StripWriter:
    """Streamed image writer fed top-to-bottom full-width strips.

    Strips must arrive in order; an out-of-order or partial-width strip is
    rejected.  ``close`` finalizes the file and fails if rows are missing.
    """

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self._rows_written = 0
        self._closed = False

    def _check_strip(self, block: PixelBlock):
        if self._closed:
            raise ValueError("writer is closed")
        if block.origin_x != 0 or block.width != self.width:
            raise ValueError(
                f"strip must span the full width {self.width}, "
                f"got x={block.origin_x} width={block.width}"
            )
        if block.origin_y != self._rows_written:
            raise ValueError(
                f"out-of-order strip: expected y={self._rows_written}, "
                f"got y={block.origin_y}"
            )
        if block.origin_y + block.height > self.height:
            raise ValueError("strip extends past the image height")

    def write_strip(self, block: PixelBlock):
        self._check_strip(block)
        self._write(block.pixels)
        self._rows_written += block.height

    def _write(self, rows: np.ndarray):
        raise NotImplementedError

    def close(self):
        raise NotImplementedError

    def abort(self):
        """Release resources without finalizing; the file is left partial."""
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


class PngStripWriter(StripWriter):
    """Streaming PNG encoder: scanlines go straight through zlib."""

    def __init__(self, path, width, height, compress_level: int = 6):
        super().__init__(width, height)
        self._fh = open(path, "wb")
        self._fh.write(_PNG_SIGNATURE)
        ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
        self._put_chunk(b"IHDR", ihdr)
        self._comp = zlib.compressobj(compress_level)

    def _put_chunk(self, ctype: bytes, data: bytes):
        self._fh.write(struct.pack(">I", len(data)))
        self._fh.write(ctype)
        self._fh.write(data)
        self._fh.write(struct.pack(">I", zlib.crc32(ctype + data) & 0xFFFFFFFF))

    def _write(self, rows):
        h = rows.shape[0]
        # filter byte 0 (None) in front of every scanline
        filtered = np.empty((h, 1 + self.width * 3), dtype=np.uint8)
        filtered[:, 0] = 0
        filtered[:, 1:] = rows.reshape(h, self.width * 3)
        payload = self._comp.compress(filtered.tobytes())
        if payload:
            self._put_chunk(b"IDAT", payload)

    def close(self):
        if self._closed:
            return
        if self._rows_written != self.height:
            self.abort()
            raise ValueError(
                f"incomplete image: {self._rows_written} of {self.height} rows written"
            )
        self._put_chunk(b"IDAT", self._comp.flush())
        self._put_chunk(b"IEND", b"")
        self._closed = True
        self._fh.close()

    def abort(self):
        self._closed = True
        self._fh.close()


class TiffStripWriter(StripWriter):
    """Streaming tiled-TIFF writer.

    Incoming strips are re-chunked into bands of 256 rows; a background
    thread feeds the bands tile by tile to the TIFF encoder.  BigTIFF is
    chosen automatically when the pixel data would overflow classic TIFF
    offsets.  The bounded queue gives backpressure, so at most a few bands
    are in memory at once.
    """

    def __init__(self, path, width, height, compression=None):
        super().__init__(width, height)
        self._pending = np.empty((0, width, 3), dtype=np.uint8)
        self._queue: queue.Queue = queue.Queue(maxsize=2)
        self._error = None
        bigtiff = width * height * 3 >= 2**32 - 2**25
        self._thread = threading.Thread(
            target=self._encode,
            args=(path, bigtiff, compression),
            name="tiff-writer",
            daemon=True,
        )
        self._thread.start()

    def _tiles(self):
        while True:
            band = self._queue.get()
            if band is None:
                return
            for x in range(0, self.width, _TILE):
                yield np.ascontiguousarray(band[:, x : x + _TILE])

    def _encode(self, path, bigtiff, compression):
        try:
            with tifffile.TiffWriter(path, bigtiff=bigtiff) as tif:
                tif.write(
                    self._tiles(),
                    shape=(self.height, self.width, 3),
                    dtype=np.uint8,
                    tile=(_TILE, _TILE),
                    photometric="rgb",
                    compression=compression,
                )
        except BaseException as exc:  # surfaced to the producer thread
            self._error = exc
            while True:  # unblock the producer, swallow remaining bands
                if self._queue.get() is None:
                    return

    def _put(self, band):
        if self._error is not None:
            raise self._error
        self._queue.put(band)

    def _write(self, rows):
        self._pending = np.concatenate([self._pending, rows])
        while self._pending.shape[0] >= _TILE:
            self._put(self._pending[:_TILE].copy())
            self._pending = self._pending[_TILE:]

    def close(self):
        if self._closed:
            return
        try:
            if self._rows_written != self.height:
                raise ValueError(
                    f"incomplete image: {self._rows_written} of {self.height} rows written"
                )
            if self._pending.shape[0]:
                self._put(self._pending)
                self._pending = self._pending[:0]
            self._put(None)
            self._thread.join()
            if self._error is not None:
                raise self._error
        except BaseException:
            self.abort()
            raise
        self._closed = True

    def abort(self):
        if self._closed:
            return
        self._closed = True
        try:
            self._queue.put_nowait(None)
        except queue.Full:
            # encoder is behind; drain one slot so the sentinel fits
            try:
                self._queue.get_nowait()
            except queue.Empty:
                pass
            self._queue.put(None)
        self._thread.join(timeout=10)


def open_writer(path, width: int, height: int) -> StripWriter:
    """Create a strip writer for ``path``; the extension picks the format."""
    name = str(path).lower()
    if name.endswith(".png"):
        return PngStripWriter(path, width, height)
    if name.endswith((".tif", ".tiff")):
        return TiffStripWriter(path, width, height)
    raise UnsupportedFormatError(
        f"{path}: unsupported output extension (use .png, .tif, or .tiff)"
    )
