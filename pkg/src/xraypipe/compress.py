"""Patient-side encoder: blind noise sensing, optional edge-preserving
enhancement, downscale to the transmit resolution, quality selection under an
optional byte budget, and the XRCP payload container.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imaging import GrayImage, edge_preserve_enhance, resize
from .numerics import encode_blocks, quality_to_table

__all__ = [
    "CompressConfig",
    "CompressedPayload",
    "PayloadError",
    "estimate_noise_sigma",
    "choose_quality",
    "compress",
]

PAYLOAD_MAGIC = b"XRCP"
PAYLOAD_VERSION = 1
_FLAG_PREPROCESSED = 0x01
_FLAG_OVER_BUDGET = 0x02

# |laplacian-of-difference| responds to noise but annihilates linear trends
_NOISE_MASK = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])


class PayloadError(ValueError):
    """Malformed or corrupt XRCP payload."""


@dataclass(frozen=True)
class CompressConfig:
    """Encoder settings; quality search happens inside [q_lo, q_hi]."""

    target_width: int = 128
    target_height: int = 128
    q_lo: int = 50
    q_hi: int = 75
    size_budget: int | None = None
    preprocess_threshold: float = 0.02
    preprocess_alpha: float = 0.5

    def __post_init__(self):
        if not (1 <= self.q_lo <= self.q_hi <= 100):
            raise ValueError(f"need 1 <= q_lo <= q_hi <= 100, got [{self.q_lo}, {self.q_hi}]")
        if self.target_width < 8 or self.target_height < 8:
            raise ValueError(
                f"target resolution must be >= 8x8, got {self.target_width}x{self.target_height}"
            )
        if self.size_budget is not None and self.size_budget < 1:
            raise ValueError(f"size budget must be positive, got {self.size_budget}")
        if self.preprocess_alpha < 0 or self.preprocess_threshold < 0:
            raise ValueError("preprocess threshold and alpha must be >= 0")


@dataclass(frozen=True)
class CompressedPayload:
    """Encoded image plus the geometry needed to restore it."""

    orig_width: int
    orig_height: int
    down_width: int
    down_height: int
    quality: int
    preprocessed: bool
    over_budget: bool
    packed: bytes

    def __post_init__(self):
        if len(self.packed) == 0:
            raise ValueError("payload must carry packed coefficients")

    @property
    def crc32(self) -> int:
        return zlib.crc32(self.packed) & 0xFFFFFFFF

    def to_bytes(self) -> bytes:
        """Serialize to the XRCP container (little-endian, crc over packed)."""
        flags = (_FLAG_PREPROCESSED if self.preprocessed else 0) | (
            _FLAG_OVER_BUDGET if self.over_budget else 0
        )
        head = struct.pack(
            "<4sBHHHHBBI",
            PAYLOAD_MAGIC,
            PAYLOAD_VERSION,
            self.orig_width,
            self.orig_height,
            self.down_width,
            self.down_height,
            self.quality,
            flags,
            len(self.packed),
        )
        return head + self.packed + struct.pack("<I", self.crc32)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedPayload":
        head_size = struct.calcsize("<4sBHHHHBBI")
        if len(data) < head_size:
            raise PayloadError(f"payload too short for header ({len(data)} bytes)")
        magic, version, ow, oh, dw, dh, q, flags, plen = struct.unpack(
            "<4sBHHHHBBI", data[:head_size]
        )
        if magic != PAYLOAD_MAGIC:
            raise PayloadError(f"bad magic {magic!r}")
        if version != PAYLOAD_VERSION:
            raise PayloadError(f"unsupported payload version {version}")
        if len(data) != head_size + plen + 4:
            raise PayloadError(
                f"length mismatch: header declares {plen} packed bytes, container has {len(data) - head_size - 4}"
            )
        packed = data[head_size : head_size + plen]
        (crc,) = struct.unpack("<I", data[head_size + plen :])
        if zlib.crc32(packed) & 0xFFFFFFFF != crc:
            raise PayloadError("crc32 mismatch: payload corrupt")
        return cls(
            orig_width=ow,
            orig_height=oh,
            down_width=dw,
            down_height=dh,
            quality=q,
            preprocessed=bool(flags & _FLAG_PREPROCESSED),
            over_budget=bool(flags & _FLAG_OVER_BUDGET),
            packed=packed,
        )


def estimate_noise_sigma(img: GrayImage) -> float:
    """Blind noise estimate (Immerkaer): sqrt(pi/2)/(6(W-2)(H-2)) * sum|img * L|."""
    if img.width < 3 or img.height < 3:
        raise ValueError(f"noise estimation needs at least 3x3, got {img.width}x{img.height}")
    resp = ndimage.convolve(img.data, _NOISE_MASK, mode="reflect")
    interior = np.abs(resp[1:-1, 1:-1]).sum()
    return float(math.sqrt(math.pi / 2.0) / (6.0 * (img.width - 2) * (img.height - 2)) * interior)


def _packed_size(img: GrayImage, q: int) -> int:
    return len(encode_blocks(img.data, quality_to_table(q)))


def choose_quality(img_downscaled: GrayImage, cfg: CompressConfig) -> tuple[int, bool]:
    """Pick the quality factor; returns (q, over_budget).

    Without a budget the top of the range wins. With one, binary search finds
    the largest q whose packed size fits (packed size is non-decreasing in q);
    if even q_lo is too big, q_lo is returned with the over-budget flag set.
    """
    if cfg.size_budget is None:
        return cfg.q_hi, False
    lo, hi = cfg.q_lo, cfg.q_hi
    if _packed_size(img_downscaled, lo) > cfg.size_budget:
        return lo, True
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if _packed_size(img_downscaled, mid) <= cfg.size_budget:
            lo = mid
        else:
            hi = mid - 1
    return lo, False


def compress(img: GrayImage, cfg: CompressConfig | None = None) -> CompressedPayload:
    """Encode for transmission: sense noise, enhance if noisy, downscale, pack."""
    cfg = CompressConfig() if cfg is None else cfg
    if cfg.target_width > img.width or cfg.target_height > img.height:
        raise ValueError(
            f"target {cfg.target_width}x{cfg.target_height} exceeds input "
            f"{img.width}x{img.height}: the encoder never upscales"
        )
    preprocessed = False
    work = img
    if estimate_noise_sigma(img) > cfg.preprocess_threshold:
        work = edge_preserve_enhance(img, cfg.preprocess_alpha)
        preprocessed = True
    down = resize(work, cfg.target_width, cfg.target_height, "area")
    q, over_budget = choose_quality(down, cfg)
    packed = encode_blocks(down.data, quality_to_table(q))
    return CompressedPayload(
        orig_width=img.width,
        orig_height=img.height,
        down_width=down.width,
        down_height=down.height,
        quality=q,
        preprocessed=preprocessed,
        over_budget=over_budget,
        packed=packed,
    )
