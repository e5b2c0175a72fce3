"""Scalar and block math for the codec: Bessel J1, blur/ringing kernels,
orthonormal 8x8 DCT, quantization tables, and the coefficient pack format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import Kernel2D

__all__ = [
    "QuantTable",
    "SincSpec",
    "DecodeError",
    "STANDARD_LUMA_TABLE",
    "ZIGZAG_ORDER",
    "bessel_j1",
    "gaussian_kernel",
    "sinc_kernel",
    "dct8_forward",
    "dct8_inverse",
    "base_quant_table",
    "quality_to_table",
    "pack_coeffs",
    "unpack_coeffs",
    "encode_blocks",
    "decode_blocks",
]


class DecodeError(ValueError):
    """Corrupt coefficient stream; message names the failing block."""


# ---------------------------------------------------------------------------
# Bessel J1
# ---------------------------------------------------------------------------

_SERIES_CUTOFF = 12.0


def _j1_series(x: float) -> float:
    # sum (-1)^m (x/2)^(2m+1) / (m! (m+1)!), converges fast for |x| <= 12
    half = x / 2.0
    term = half
    total = term
    for m in range(1, 60):
        term *= -(half * half) / (m * (m + 1))
        total += term
        if abs(term) < 1e-18 * max(abs(total), 1e-30):
            break
    return total


def _j1_asymptotic(x: float) -> float:
    # Hankel expansion: J1(x) ~ sqrt(2/(pi x)) (P cos(chi) - Q sin(chi)),
    # chi = x - 3pi/4, with term_k = prod_j(4 - (2j-1)^2) / (k! (8x)^k) and
    # sign (-1)^(k//2). Summation stops at the smallest term.
    mu = 4.0
    p = 1.0
    q = 0.0
    term = 1.0
    prev = math.inf
    for k in range(1, 30):
        term *= (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        mag = abs(term)
        if mag >= prev:
            break
        prev = mag
        contrib = term if (k // 2) % 2 == 0 else -term
        if k % 2 == 1:
            q += contrib
        else:
            p += contrib
        if mag < 1e-18:
            break
    chi = x - 0.75 * math.pi
    return math.sqrt(2.0 / (math.pi * x)) * (p * math.cos(chi) - q * math.sin(chi))


def bessel_j1(x: float) -> float:
    """Bessel function of the first kind, order 1 (odd in x)."""
    if not math.isfinite(x):
        raise ValueError(f"bessel_j1 requires finite input, got {x!r}")
    ax = abs(x)
    val = _j1_series(ax) if ax <= _SERIES_CUTOFF else _j1_asymptotic(ax)
    return -val if x < 0 else val


# ---------------------------------------------------------------------------
# Kernel builders
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> Kernel2D:
    """Isotropic Gaussian blur kernel, side 2*ceil(3*sigma)+1, taps sum to 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    taps = np.outer(g, g)
    taps /= taps.sum()
    return Kernel2D(taps, normalized=True)


@dataclass(frozen=True)
class SincSpec:
    """Circular low-pass ("ringing") kernel parameters."""

    eta: float  # cutoff frequency, radians/sample, in (0, pi]
    radius: int  # kernel half-width in pixels

    def __post_init__(self):
        if not (0.0 < self.eta <= math.pi):
            raise ValueError(f"eta must be in (0, pi], got {self.eta}")
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")


def sinc_kernel(spec: SincSpec) -> Kernel2D:
    """Circular sinc kernel h(p,q) = eta/(2 pi r) * J1(eta r), r = hypot(p, q).

    The center tap is the analytic r->0 limit eta^2/(4 pi). Taps are
    normalized to sum 1 so mean luminance is preserved.
    """
    r = spec.radius
    side = 2 * r + 1
    taps = np.empty((side, side))
    for p in range(-r, r + 1):
        for q in range(-r, r + 1):
            rad = math.hypot(p, q)
            if rad == 0.0:
                taps[p + r, q + r] = spec.eta**2 / (4.0 * math.pi)
            else:
                taps[p + r, q + r] = spec.eta / (2.0 * math.pi * rad) * bessel_j1(spec.eta * rad)
    taps /= taps.sum()
    return Kernel2D(taps, normalized=True)


# ---------------------------------------------------------------------------
# 8x8 orthonormal DCT-II
# ---------------------------------------------------------------------------


def _dct_matrix() -> np.ndarray:
    m = np.empty((8, 8))
    for k in range(8):
        ck = math.sqrt(1.0 / 8.0) if k == 0 else math.sqrt(2.0 / 8.0)
        for n in range(8):
            m[k, n] = ck * math.cos(math.pi * (2 * n + 1) * k / 16.0)
    return m


_DCT_M = _dct_matrix()


def dct8_forward(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of an 8x8 block."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (8, 8):
        raise ValueError(f"expected an 8x8 block, got {block.shape}")
    return _DCT_M @ block @ _DCT_M.T


def dct8_inverse(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct8_forward`."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (8, 8):
        raise ValueError(f"expected an 8x8 block, got {coeffs.shape}")
    return _DCT_M.T @ coeffs @ _DCT_M


# ---------------------------------------------------------------------------
# Quantization tables
# ---------------------------------------------------------------------------

# Standard luminance quantization divisors, row-major.
STANDARD_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


def _zigzag_order() -> np.ndarray:
    """Natural (row-major) indices of an 8x8 block in zigzag scan order."""
    order = []
    for s in range(15):
        rng = range(max(0, s - 7), min(s, 7) + 1)
        diag = [(s - j, j) for j in rng]
        if s % 2 == 1:
            diag.reverse()
        order.extend(r * 8 + c for r, c in diag)
    return np.array(order, dtype=np.int64)


ZIGZAG_ORDER = _zigzag_order()


@dataclass(frozen=True)
class QuantTable:
    """64 integer divisors in zigzag order, each in [1, 255]."""

    divisors: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.divisors, dtype=np.int64)
        if d.shape != (64,):
            raise ValueError(f"quant table needs 64 divisors, got shape {d.shape}")
        if d.min() < 1 or d.max() > 255:
            raise ValueError("quant divisors must lie in [1, 255]")
        d = np.ascontiguousarray(d)
        d.setflags(write=False)
        object.__setattr__(self, "divisors", d)

    def as_block(self) -> np.ndarray:
        """Divisors rearranged into the natural 8x8 layout."""
        block = np.empty(64, dtype=np.int64)
        block[ZIGZAG_ORDER] = self.divisors
        return block.reshape(8, 8)


def base_quant_table() -> QuantTable:
    """The standard luminance table as a zigzag-ordered QuantTable."""
    return QuantTable(STANDARD_LUMA_TABLE.reshape(-1)[ZIGZAG_ORDER])


def quality_to_table(q: int, base: QuantTable | None = None) -> QuantTable:
    """Scale a base table by quality factor q in [1, 100].

    scale = 5000/q for q < 50 else 200 - 2q; divisors are
    clamp(round(base * scale / 100), 1, 255), so q=50 reproduces the base
    table and q=100 is near-lossless (all divisors 1).
    """
    if not (1 <= q <= 100):
        raise ValueError(f"quality must be in [1, 100], got {q}")
    base = base_quant_table() if base is None else base
    scale = 5000.0 / q if q < 50 else float(200 - 2 * q)
    scaled = np.floor(base.divisors * scale / 100.0 + 0.5).astype(np.int64)
    return QuantTable(np.clip(scaled, 1, 255))


# ---------------------------------------------------------------------------
# Coefficient packing: zigzag + zero-run tokens + signed varints
# ---------------------------------------------------------------------------
#
# Stream layout: u32le block count, then per block a token list. A token is
# varint(run-of-zeros) followed by a zigzag-signed varint of the nonzero
# value; the byte 0x40 (run = 64) terminates every block. Varints are LEB128
# (7 data bits per byte, high bit = continuation).

_EOB = 64
_MAX_MAG = 1 << 31


def _varint(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def pack_coeffs(blocks: np.ndarray) -> bytes:
    """Pack quantized coefficient blocks (n, 8, 8) into the token stream."""
    blocks = np.asarray(blocks, dtype=np.int64)
    if blocks.ndim != 3 or blocks.shape[1:] != (8, 8):
        raise ValueError(f"expected (n, 8, 8) integer blocks, got {blocks.shape}")
    if blocks.size and np.abs(blocks).max() >= _MAX_MAG:
        raise ValueError("coefficient magnitude out of range (|c| < 2^31)")
    zz = blocks.reshape(len(blocks), 64)[:, ZIGZAG_ORDER]
    out = bytearray(len(blocks).to_bytes(4, "little"))
    for row in zz:
        nz = np.flatnonzero(row)
        prev = -1
        for idx in nz:
            out += _varint(int(idx) - prev - 1)
            v = int(row[idx])
            out += _varint((v << 1) ^ (v >> 63))
            prev = int(idx)
        out.append(_EOB)
    return bytes(out)


def _read_varint(data: bytes, pos: int, block: int) -> tuple[int, int]:
    shift = 0
    value = 0
    while True:
        if pos >= len(data):
            raise DecodeError(f"block {block}: truncated varint at byte {pos}")
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not (b & 0x80):
            return value, pos
        shift += 7
        if shift > 63:
            raise DecodeError(f"block {block}: varint overflow at byte {pos}")


def unpack_coeffs(data: bytes) -> np.ndarray:
    """Inverse of :func:`pack_coeffs`; bit-exact round trip."""
    if len(data) < 4:
        raise DecodeError("block 0: missing block count header")
    count = int.from_bytes(data[:4], "little")
    pos = 4
    zz = np.zeros((count, 64), dtype=np.int64)
    for b in range(count):
        slot = 0
        while True:
            run, pos = _read_varint(data, pos, b)
            if run == _EOB:
                break
            slot += run
            if slot >= 64:
                raise DecodeError(f"block {b}: zero run overflows block at byte {pos}")
            raw, pos = _read_varint(data, pos, b)
            value = (raw >> 1) ^ -(raw & 1)
            if value == 0:
                raise DecodeError(f"block {b}: explicit zero token at byte {pos}")
            zz[b, slot] = value
            slot += 1
    if pos != len(data):
        raise DecodeError(f"block {count - 1}: {len(data) - pos} trailing bytes")
    blocks = np.zeros((count, 64), dtype=np.int64)
    blocks[:, ZIGZAG_ORDER] = zz
    return blocks.reshape(count, 8, 8)


# ---------------------------------------------------------------------------
# Blockwise image codec (shared by the degradation emulator, the
# patient-side encoder, and the clinician-side decoder)
# ---------------------------------------------------------------------------


def _pad_to_blocks(data: np.ndarray) -> np.ndarray:
    h, w = data.shape
    ph = (-h) % 8
    pw = (-w) % 8
    if ph or pw:
        data = np.pad(data, ((0, ph), (0, pw)), mode="symmetric")
    return data


def encode_blocks(data: np.ndarray, table: QuantTable) -> bytes:
    """Level-shift to 0..255, 8x8 DCT, quantize, pack.

    Images whose dimensions are not multiples of 8 are reflect-padded; the
    decoder crops back to the original size.
    """
    padded = _pad_to_blocks(np.asarray(data, dtype=np.float64))
    h, w = padded.shape
    shifted = padded * 255.0 - 128.0
    tiles = shifted.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)
    coeffs = np.einsum("kn,bnm,lm->bkl", _DCT_M, tiles, _DCT_M)
    div = table.as_block()[None, :, :]
    quant = (np.sign(coeffs) * np.floor(np.abs(coeffs) / div + 0.5)).astype(np.int64)
    return pack_coeffs(quant)


def decode_blocks(packed: bytes, width: int, height: int, table: QuantTable) -> np.ndarray:
    """Unpack, dequantize, inverse DCT, level-unshift; crops to width x height."""
    bw = (width + 7) // 8
    bh = (height + 7) // 8
    quant = unpack_coeffs(packed)
    if len(quant) != bw * bh:
        raise DecodeError(f"block 0: stream has {len(quant)} blocks, geometry needs {bw * bh}")
    coeffs = quant.astype(np.float64) * table.as_block()[None, :, :]
    tiles = np.einsum("kn,bkl,lm->bnm", _DCT_M, coeffs, _DCT_M)
    full = tiles.reshape(bh, bw, 8, 8).transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)
    data = (full + 128.0) / 255.0
    return np.clip(data[:height, :width], 0.0, 1.0)
