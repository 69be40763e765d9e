"""Image container, polar fan geometry, resampling primitives, and file I/O.

Pixel values are floats in nominal [0, 1]; nothing clamps internally, but
every public operation keeps them finite. 8- and 16-bit file formats
quantize linearly on write: q = round(clip(x, 0, 1) * maxval).

The two downsamplers here are the canonical scalar recipes; the training
code carries torch twins written with the same operation order so that
both produce bit-identical results on identical input.
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DataIOError

# Catmull-Rom weights for sampling at offset 0.5 between two source pixels
# (a = -0.5 kernel evaluated at distances 1.5, 0.5, 0.5, 1.5). Both are
# exact binary fractions, -1/16 and 9/16.
_CR_OUTER = -0.0625
_CR_INNER = 0.5625


class Image:
    """Single-channel 2D raster. Immutable: the pixel buffer is frozen."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        arr = np.array(pixels, dtype=np.float64, order="C")
        if arr.ndim != 2:
            raise ValueError(f"image must be 2D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dims must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image pixels must be finite")
        arr.flags.writeable = False
        self.pixels = arr

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def __repr__(self):
        return f"Image({self.height}x{self.width})"


@dataclass(frozen=True)
class PolarFan:
    """Raw sonar ping grid: range_bins x beam_count samples over a fan sector."""

    range_bins: int
    beam_count: int
    fov_deg: float
    max_range: float
    samples: np.ndarray

    def __post_init__(self):
        if self.range_bins < 1 or self.beam_count < 1:
            raise ValueError("range_bins and beam_count must be >= 1")
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if not (self.max_range > 0.0):
            raise ValueError("max_range must be positive")
        arr = np.array(self.samples, dtype=np.float64, order="C")
        if arr.shape != (self.range_bins, self.beam_count):
            raise ValueError(
                f"samples shape {arr.shape} != ({self.range_bins}, {self.beam_count})"
            )
        if not np.isfinite(arr).all():
            raise ValueError("fan samples must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @classmethod
    def from_samples(cls, samples, fov_deg: float = 50.0, max_range: float = 10.0):
        arr = np.asarray(samples, dtype=np.float64)
        return cls(arr.shape[0], arr.shape[1], fov_deg, max_range, arr)


def reflect_index(idx, n: int):
    """Symmetric (edge-repeating) reflection of indices into [0, n).

    Pattern for n=4: ... 1 0 | 0 1 2 3 | 3 2 1 0 | 0 1 ...
    """
    idx = np.asarray(idx) % (2 * n)
    return np.where(idx < n, idx, 2 * n - 1 - idx)


def polar_to_cartesian(fan: PolarFan, out_size: int) -> Image:
    """Resample a polar fan onto a square Cartesian grid.

    Apex sits at the bottom-center pixel center ((W-1)/2, H-1), the fan
    opens upward, bearing 0 along the vertical axis and positive to the
    right. max_range maps to (out_size - 1) pixels. In-sector pixels are
    bilinearly interpolated in (range, bearing); everything else is 0.
    """
    if out_size < 2:
        raise ValueError(f"out_size must be >= 2, got {out_size}")
    if not np.isfinite(fan.samples).all():
        raise ValueError("fan samples must be finite")

    n = int(out_size)
    cx = (n - 1) / 2.0
    cy = float(n - 1)
    meters_per_px = fan.max_range / (n - 1)

    dx = np.arange(n, dtype=np.float64)[None, :] - cx
    dy = cy - np.arange(n, dtype=np.float64)[:, None]
    dxg = np.broadcast_to(dx, (n, n))
    dyg = np.broadcast_to(dy, (n, n))

    rng = np.hypot(dxg, dyg) * meters_per_px
    bearing = np.arctan2(dxg, dyg)
    half = np.deg2rad(fan.fov_deg) / 2.0
    inside = (rng <= fan.max_range) & (np.abs(bearing) <= half)

    nr, nb = fan.range_bins, fan.beam_count
    ri = rng / fan.max_range * (nr - 1) if nr > 1 else np.zeros((n, n))
    bi = (bearing + half) / (2.0 * half) * (nb - 1) if nb > 1 else np.zeros((n, n))

    # clamp base index so i0+1 stays valid; at ri == nr-1 the fraction
    # becomes exactly 1 and all weight lands on the upper tap
    i0 = np.clip(np.floor(ri).astype(np.int64), 0, max(nr - 2, 0))
    j0 = np.clip(np.floor(bi).astype(np.int64), 0, max(nb - 2, 0))
    i1 = np.minimum(i0 + 1, nr - 1)
    j1 = np.minimum(j0 + 1, nb - 1)
    fr = np.clip(ri - i0, 0.0, 1.0)
    fb = np.clip(bi - j0, 0.0, 1.0)

    s = fan.samples
    v00 = s[i0, j0]
    v01 = s[i0, j1]
    v10 = s[i1, j0]
    v11 = s[i1, j1]
    w00 = (1.0 - fr) * (1.0 - fb)
    w01 = (1.0 - fr) * fb
    w10 = fr * (1.0 - fb)
    w11 = fr * fb
    val = (v00 * w00 + v01 * w01) + (v10 * w10 + v11 * w11)
    return Image(np.where(inside, val, 0.0))


def _catrom_halve_axis0(arr: np.ndarray) -> np.ndarray:
    # sample at source row 2i + 0.5 with taps at rows 2i-1 .. 2i+2
    h = arr.shape[0]
    i = np.arange(h // 2)
    r0 = reflect_index(2 * i - 1, h)
    r1 = 2 * i
    r2 = 2 * i + 1
    r3 = reflect_index(2 * i + 2, h)
    return (_CR_OUTER * arr[r0] + _CR_INNER * arr[r1]) + (
        _CR_INNER * arr[r2] + _CR_OUTER * arr[r3]
    )


def bicubic_downsample2(img: Image) -> Image:
    """Halve both image dimensions with a Catmull-Rom bicubic kernel.

    Separable: rows first, then columns. Boundary handling is symmetric
    reflection. Requires even dims.
    """
    h, w = img.shape
    if h % 2 or w % 2:
        raise ValueError(f"bicubic_downsample2 needs even dims, got {h}x{w}")
    out = _catrom_halve_axis0(img.pixels)
    out = _catrom_halve_axis0(out.T).T
    return Image(out)


def bilinear_downsample2(tensor):
    """Halve the spatial dims of an H x W x C stack (2x2 block average).

    Bilinear sampling at the half-grid points (2i + 0.5, 2j + 0.5) puts
    equal weight on each 2x2 block, so this is an exact block mean.
    Accepts a plain ndarray (H, W) or (H, W, C), or any object with a
    `.values` array and a `.with_values(arr)` constructor; returns the
    same kind.
    """
    wrapped = hasattr(tensor, "values") and hasattr(tensor, "with_values")
    arr = np.asarray(tensor.values if wrapped else tensor, dtype=np.float64)
    if arr.shape[0] % 2 or arr.shape[1] % 2:
        raise ValueError(f"bilinear_downsample2 needs even dims, got {arr.shape}")
    a = arr[0::2, 0::2]
    b = arr[0::2, 1::2]
    c = arr[1::2, 0::2]
    d = arr[1::2, 1::2]
    out = (((a + b) + c) + d) * 0.25
    if wrapped:
        return tensor.with_values(out)
    return out


# ---------------------------------------------------------------------------
# file I/O


def _quantize(pixels: np.ndarray, maxval: int) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * maxval).astype(np.uint32)


def atomic_write_bytes(path, data: bytes):
    """Write a file through a same-directory temp name + rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_image(img: Image, path):
    """Write PNG (16-bit grayscale) or PGM (8-bit, P5) depending on suffix."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".png":
            from PIL import Image as PILImage

            q = _quantize(img.pixels, 65535).astype(np.uint16)
            buf = PILImage.fromarray(q)  # uint16 maps to 16-bit grayscale
            fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                                       prefix=".tmp-", suffix=".png")
            os.close(fd)
            try:
                buf.save(tmp, format="PNG")
                os.replace(tmp, path)
            except BaseException:
                try:
                    os.unlink(tmp)
                except OSError:
                    pass
                raise
        elif ext == ".pgm":
            q = _quantize(img.pixels, 255).astype(np.uint8)
            header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
            atomic_write_bytes(path, header + q.tobytes())
        else:
            raise DataIOError(f"unsupported image extension: {path!r}")
    except OSError as e:
        raise DataIOError(f"cannot write image {path!r}: {e}") from e


def _read_pgm(path) -> Image:
    with open(path, "rb") as f:
        data = f.read()
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments running to end of line
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if not m:
            raise DataIOError(f"truncated PGM header in {path!r}")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataIOError(f"unsupported PGM magic {tokens[0]!r} in {path!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise DataIOError(f"malformed PGM header in {path!r}") from e
    if maxval != 255:
        raise DataIOError(f"unsupported PGM maxval {maxval} (only 255) in {path!r}")
    if w < 1 or h < 1:
        raise DataIOError(f"bad PGM dims {w}x{h} in {path!r}")
    raster = data[pos + 1 : pos + 1 + w * h]  # single whitespace after maxval
    if len(raster) != w * h:
        raise DataIOError(f"PGM raster truncated in {path!r}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    return Image(arr.astype(np.float64) / 255.0)


def read_image(path) -> Image:
    """Read a grayscale PNG (8- or 16-bit) or an 8-bit P5 PGM."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".pgm":
            return _read_pgm(path)
        if ext == ".png":
            from PIL import Image as PILImage

            with PILImage.open(path) as im:
                mode = im.mode
                arr = np.array(im)
            if mode in ("I;16", "I"):
                return Image(arr.astype(np.float64) / 65535.0)
            if mode == "L":
                return Image(arr.astype(np.float64) / 255.0)
            raise DataIOError(f"unsupported PNG mode {mode!r} in {path!r}")
        raise DataIOError(f"unsupported image extension: {path!r}")
    except OSError as e:
        raise DataIOError(f"cannot read image {path!r}: {e}") from e


def write_tensor_dump(values: np.ndarray, path):
    """Raw float dump: little-endian [u32 H][u32 W][u32 C] then float32 planes.

    Data is channel-major: C contiguous H*W planes. A 2D array is written
    as C = 1.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"tensor dump expects (H, W, C), got shape {arr.shape}")
    h, w, c = arr.shape
    header = struct.pack("<III", h, w, c)
    planes = np.ascontiguousarray(arr.transpose(2, 0, 1), dtype="<f4")
    try:
        atomic_write_bytes(path, header + planes.tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write tensor dump {path!r}: {e}") from e


def read_tensor_dump(path) -> np.ndarray:
    """Read the raw float dump format back as a float64 (H, W, C) array."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataIOError(f"cannot read tensor dump {path!r}: {e}") from e
    if len(data) < 12:
        raise DataIOError(f"tensor dump {path!r} too short for header")
    h, w, c = struct.unpack("<III", data[:12])
    if h < 1 or w < 1 or c < 1:
        raise DataIOError(f"bad tensor dump dims {h}x{w}x{c} in {path!r}")
    expect = 12 + h * w * c * 4
    if len(data) != expect:
        raise DataIOError(
            f"tensor dump {path!r} has {len(data)} bytes, expected {expect}"
        )
    planes = np.frombuffer(data, dtype="<f4", offset=12).reshape(c, h, w)
    out = planes.transpose(1, 2, 0).astype(np.float64)
    if not np.isfinite(out).all():
        raise DataIOError(f"tensor dump {path!r} contains non-finite values")
    return out
