"""Grayscale image container, PGM/PNG input, resampling and spatial filtering.

All pixel math happens on normalized float64 samples in [0, 1]; the original
bit depth is kept only as metadata. Border handling is mirror-of-edge-sample
("reflect") everywhere: ``a b c | c b a``.
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "GrayImage",
    "Kernel2D",
    "PgmParseError",
    "RESAMPLE_FILTERS",
    "read_pgm",
    "write_pgm",
    "read_png",
    "read_image_file",
    "resize",
    "convolve",
    "sobel_magnitude",
    "edge_preserve_enhance",
]

RESAMPLE_FILTERS = ("nearest", "bilinear", "bicubic", "lanczos3", "area")


class PgmParseError(ValueError):
    """Malformed PGM input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image: float64 samples in [0, 1], shape (height, width)."""

    data: np.ndarray
    source_depth: int = 8

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"image data must be 2-D and non-empty, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("image contains non-finite samples")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("image samples out of [0, 1]")
        if self.source_depth not in (8, 16):
            raise ValueError(f"source_depth must be 8 or 16, got {self.source_depth}")
        a = np.ascontiguousarray(a)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_array(cls, a, source_depth: int = 8) -> "GrayImage":
        """Build an image from any float array, clamping into [0, 1]."""
        a = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError("image contains non-finite samples")
        return cls(np.clip(a, 0.0, 1.0), source_depth)


@dataclass(frozen=True)
class Kernel2D:
    """Square odd-sided convolution kernel; ``normalized`` asserts taps sum to 1."""

    taps: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] % 2 != 1:
            raise ValueError(f"kernel must be square with odd side, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("kernel taps must be finite")
        if self.normalized and abs(float(t.sum()) - 1.0) > 1e-9:
            raise ValueError(f"normalized kernel must sum to 1, got {t.sum()!r}")
        t = np.ascontiguousarray(t)
        t.setflags(write=False)
        object.__setattr__(self, "taps", t)

    @property
    def side(self) -> int:
        return self.taps.shape[0]


def delta_kernel(side: int = 3) -> Kernel2D:
    """Identity kernel: 1 at the center, 0 elsewhere."""
    t = np.zeros((side, side))
    t[side // 2, side // 2] = 1.0
    return Kernel2D(t, normalized=True)


# ---------------------------------------------------------------------------
# PGM / PNG input and output
# ---------------------------------------------------------------------------

_WS = b" \t\r\n"


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Return the next header token and the offset just past it.

    Skips whitespace and ``#`` comment lines per the PGM grammar.
    """
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c in (b"#",):
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        elif c in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        else:
            break
    if pos >= n:
        raise PgmParseError("unexpected end of header", pos)
    start = pos
    while pos < n and data[pos : pos + 1] not in (b" ", b"\t", b"\r", b"\n", b"#"):
        pos += 1
    return data[start:pos], pos


def read_pgm(data: bytes) -> GrayImage:
    """Parse a binary PGM (P5) byte string into a GrayImage.

    Supports maxval 255 (8-bit) and 65535 (16-bit big-endian samples).
    """
    if data[:2] != b"P5":
        raise PgmParseError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(data, pos)
        if not re.fullmatch(rb"[0-9]+", tok):
            raise PgmParseError(f"expected integer header field, got {tok!r}", pos - len(tok))
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmParseError(f"bad dimensions {width}x{height}", 2)
    if maxval not in (255, 65535):
        raise PgmParseError(f"unsupported maxval {maxval} (need 255 or 65535)", pos - len(str(maxval)))
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\r", b"\n"):
        raise PgmParseError("missing whitespace after maxval", pos)
    pos += 1
    bps = 1 if maxval == 255 else 2
    need = width * height * bps
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise PgmParseError(
            f"truncated payload: need {need} bytes, have {len(raw)}", pos + len(raw)
        )
    dtype = np.uint8 if bps == 1 else np.dtype(">u2")
    samples = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(height, width)
    depth = 8 if maxval == 255 else 16
    return GrayImage(samples / maxval, source_depth=depth)


def write_pgm(img: GrayImage, depth: int | None = None) -> bytes:
    """Serialize to binary PGM at 8 or 16 bits; rounding is round-half-up."""
    depth = img.source_depth if depth is None else depth
    if depth not in (8, 16):
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    maxval = (1 << depth) - 1
    q = np.floor(img.data * maxval + 0.5)
    q = np.clip(q, 0, maxval)
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    if depth == 8:
        return header + q.astype(np.uint8).tobytes()
    return header + q.astype(">u2").tobytes()


def read_png(data: bytes) -> GrayImage:
    """Decode an 8/16-bit grayscale PNG with the same [0, 1] normalization."""
    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
            depth = 8
        elif im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            depth = 16
        else:
            raise ValueError(f"PNG mode {im.mode!r} is not 8/16-bit grayscale")
    return GrayImage(np.clip(arr, 0.0, 1.0), source_depth=depth)


def read_image_file(path) -> GrayImage:
    """Read a PGM or PNG file by suffix sniffing (PNG magic, else PGM)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return read_png(data)
    return read_pgm(data)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Fold indices into [0, n) by mirroring with edge duplication."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m >= n, period - 1 - m, m)


def _bicubic(x: np.ndarray) -> np.ndarray:
    # Catmull-Rom: a = -0.5
    a = -0.5
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    out[near] = (a + 2) * ax[near] ** 3 - (a + 3) * ax[near] ** 2 + 1
    out[far] = a * ax[far] ** 3 - 5 * a * ax[far] ** 2 + 8 * a * ax[far] - 4 * a
    return out


def _bilinear(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(x))


def _lanczos3(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    inside = np.abs(x) < 3.0
    xi = x[inside]
    out[inside] = np.sinc(xi) * np.sinc(xi / 3.0)
    return out


_FILTER_FUNCS = {"bilinear": (_bilinear, 1.0), "bicubic": (_bicubic, 2.0), "lanczos3": (_lanczos3, 3.0)}


def _axis_weights(kind: str, n_in: int, n_out: int) -> np.ndarray:
    """Build the (n_out, n_in) resampling matrix for one axis.

    Sample j sits at coordinate j + 0.5. Windowed filters widen their support
    by the scale factor when minifying (antialiasing); every row is
    normalized so constants are preserved exactly.
    """
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    if kind == "nearest":
        src = np.minimum((np.floor((np.arange(n_out) + 0.5) * scale)).astype(int), n_in - 1)
        w[np.arange(n_out), src] = 1.0
        return w
    if kind == "area":
        # exact overlap of output cell [i*scale, (i+1)*scale) with source cells
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            j0, j1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_in)
            for j in range(j0, j1):
                w[i, j] = min(hi, j + 1) - max(lo, j)
            w[i] /= w[i].sum()
        return w
    func, base_support = _FILTER_FUNCS[kind]
    fscale = max(scale, 1.0)
    support = base_support * fscale
    for i in range(n_out):
        center = (i + 0.5) * scale
        j0 = int(math.floor(center - support + 0.5))
        j1 = int(math.ceil(center + support - 0.5))
        js = np.arange(j0, j1 + 1)
        taps = func((js + 0.5 - center) / fscale)
        total = taps.sum()
        if total == 0.0:
            continue
        taps /= total
        np.add.at(w[i], _reflect_index(js, n_in), taps)
    return w


def resize(img: GrayImage, out_w: int, out_h: int, kind: str = "area") -> GrayImage:
    """Resample to (out_w, out_h) with the named filter.

    Filters: nearest, bilinear, bicubic (Catmull-Rom), lanczos3, area
    (box average). Output is clamped to [0, 1].
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dimensions must be >= 1, got {out_w}x{out_h}")
    if kind not in RESAMPLE_FILTERS:
        raise ValueError(f"unknown resample filter {kind!r}")
    wy = _axis_weights(kind, img.height, out_h)
    wx = _axis_weights(kind, img.width, out_w)
    out = wy @ img.data @ wx.T
    return GrayImage(np.clip(out, 0.0, 1.0), img.source_depth)


# ---------------------------------------------------------------------------
# Spatial filtering
# ---------------------------------------------------------------------------


def convolve(img: GrayImage, kernel: Kernel2D) -> GrayImage:
    """2-D convolution with reflect borders; output clamped to [0, 1]."""
    if kernel.side > min(img.width, img.height):
        raise ValueError(
            f"kernel side {kernel.side} exceeds image extent {img.width}x{img.height}"
        )
    out = ndimage.convolve(img.data, kernel.taps, mode="reflect")
    return GrayImage(np.clip(out, 0.0, 1.0), img.source_depth)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _sobel_pair(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # raw (unclamped) correlations with the standard 3x3 pair
    gx = ndimage.correlate(data, _SOBEL_X, mode="reflect")
    gy = ndimage.correlate(data, _SOBEL_X.T, mode="reflect")
    return gx, gy


def sobel_magnitude(img: GrayImage) -> GrayImage:
    """Gradient magnitude sqrt(Gx^2 + Gy^2), scaled by 1/(4*sqrt(2)) into [0, 1]."""
    gx, gy = _sobel_pair(img.data)
    mag = np.hypot(gx, gy) / (4.0 * math.sqrt(2.0))
    return GrayImage(np.clip(mag, 0.0, 1.0), img.source_depth)


def edge_preserve_enhance(img: GrayImage, alpha: float) -> GrayImage:
    """Unsharp-style boost gated by edge strength.

    out = clamp(img + alpha * M * (img - blur(img, sigma=1))), where M is the
    scaled Sobel magnitude. alpha = 0 is the identity.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return img
    from .numerics import gaussian_kernel  # deferred: numerics imports Kernel2D

    blur = ndimage.convolve(img.data, gaussian_kernel(1.0).taps, mode="reflect")
    mask = sobel_magnitude(img).data
    out = img.data + alpha * mask * (img.data - blur)
    return GrayImage(np.clip(out, 0.0, 1.0), img.source_depth)
