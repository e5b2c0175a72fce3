"""Synthetic degradation: blur, decimation, noise, block-codec loss, ringing.

Single-round chains model real capture damage; multi-round plans compound it.
Noise is drawn from counter-based streams keyed by (seed, round, stage) so a
plan's output never depends on execution schedule or on how many random
numbers earlier stages consumed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .imaging import GrayImage, Kernel2D, convolve, resize
from .numerics import SincSpec, encode_blocks, decode_blocks, gaussian_kernel, quality_to_table, sinc_kernel

__all__ = [
    "BlurStage",
    "DownsampleStage",
    "GaussianNoiseStage",
    "PoissonNoiseStage",
    "JpegStage",
    "SincStage",
    "DegradationPlan",
    "add_gaussian_noise",
    "add_poisson_noise",
    "jpeg_emulate",
    "apply_classical",
    "apply_plan",
    "plan_from_json",
    "plan_to_json",
    "load_plan",
]

_MASK64 = (1 << 64) - 1


def _stage_rng(seed: int, round_idx: int, stage_idx: int) -> np.random.Generator:
    # Philox keyed directly by (seed, round, stage): counter-based, so draws
    # are independent of thread schedule and of other stages' consumption.
    key = np.array([seed & _MASK64, ((round_idx & 0xFFFFFFFF) << 32) | (stage_idx & 0xFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class BlurStage:
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"blur sigma must be > 0, got {self.sigma}")

    def apply(self, img: GrayImage, rng: np.random.Generator) -> GrayImage:
        return convolve(img, gaussian_kernel(self.sigma))


@dataclass(frozen=True)
class DownsampleStage:
    factor: int
    filter: str = "area"

    def __post_init__(self):
        if self.factor < 1 or int(self.factor) != self.factor:
            raise ValueError(f"downsample factor must be an integer >= 1, got {self.factor}")

    def apply(self, img: GrayImage, rng: np.random.Generator) -> GrayImage:
        if self.factor == 1:
            return img
        w = max(1, img.width // self.factor)
        h = max(1, img.height // self.factor)
        return resize(img, w, h, self.filter)


@dataclass(frozen=True)
class GaussianNoiseStage:
    tau: float

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"noise tau must be >= 0, got {self.tau}")

    def apply(self, img: GrayImage, rng: np.random.Generator) -> GrayImage:
        if self.tau == 0:
            return img
        noisy = img.data + rng.normal(0.0, self.tau, size=img.data.shape)
        return GrayImage(np.clip(noisy, 0.0, 1.0), img.source_depth)


@dataclass(frozen=True)
class PoissonNoiseStage:
    scale: float  # expected photon count per unit intensity

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"poisson scale must be > 0, got {self.scale}")

    def apply(self, img: GrayImage, rng: np.random.Generator) -> GrayImage:
        counts = rng.poisson(img.data * self.scale)
        return GrayImage(np.clip(counts / self.scale, 0.0, 1.0), img.source_depth)


@dataclass(frozen=True)
class JpegStage:
    q: int

    def __post_init__(self):
        if not (1 <= self.q <= 100):
            raise ValueError(f"jpeg quality must be in [1, 100], got {self.q}")

    def apply(self, img: GrayImage, rng: np.random.Generator) -> GrayImage:
        out, _ = jpeg_emulate(img, self.q)
        return out


@dataclass(frozen=True)
class SincStage:
    eta: float
    radius: int = 10

    def __post_init__(self):
        SincSpec(self.eta, self.radius)  # validates ranges

    def apply(self, img: GrayImage, rng: np.random.Generator) -> GrayImage:
        return convolve(img, sinc_kernel(SincSpec(self.eta, self.radius)))


@dataclass(frozen=True)
class _KernelBlurStage:
    """Blur by an explicit kernel; used when the caller supplies one."""

    kernel: Kernel2D

    def apply(self, img: GrayImage, rng: np.random.Generator) -> GrayImage:
        return convolve(img, self.kernel)


Stage = BlurStage | DownsampleStage | GaussianNoiseStage | PoissonNoiseStage | JpegStage | SincStage

_STAGE_TYPES = {
    "blur": BlurStage,
    "downsample": DownsampleStage,
    "gaussian_noise": GaussianNoiseStage,
    "poisson_noise": PoissonNoiseStage,
    "jpeg": JpegStage,
    "sinc": SincStage,
}
_STAGE_NAMES = {cls: name for name, cls in _STAGE_TYPES.items()}


@dataclass(frozen=True)
class DegradationPlan:
    """Ordered rounds of stages plus the root seed for all noise draws."""

    rounds: tuple[tuple[Stage, ...], ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.rounds) < 1:
            raise ValueError("plan needs at least one round")
        object.__setattr__(self, "rounds", tuple(tuple(r) for r in self.rounds))

    @property
    def order(self) -> int:
        return len(self.rounds)


def add_gaussian_noise(img: GrayImage, tau: float, seed: int) -> GrayImage:
    """Add i.i.d. N(0, tau^2) to every sample, then clamp. tau=0 is identity."""
    return GaussianNoiseStage(tau).apply(img, _stage_rng(seed, 0, 0))


def add_poisson_noise(img: GrayImage, scale: float, seed: int) -> GrayImage:
    """Photon-counting noise: Poisson(pixel * scale) / scale, clamped."""
    return PoissonNoiseStage(scale).apply(img, _stage_rng(seed, 0, 0))


def jpeg_emulate(img: GrayImage, q: int) -> tuple[GrayImage, int]:
    """Run the block codec at quality q; returns (image, packed byte count)."""
    table = quality_to_table(q)
    packed = encode_blocks(img.data, table)
    out = decode_blocks(packed, img.width, img.height, table)
    return GrayImage(out, img.source_depth), len(packed)


def apply_classical(
    y: GrayImage, g: Kernel2D, s: int, tau: float, q: int, seed: int
) -> GrayImage:
    """One classical degradation round: blur, decimate by s, noise, codec."""
    stages: tuple[Stage, ...] = (
        _KernelBlurStage(g),
        DownsampleStage(s),
        GaussianNoiseStage(tau),
        JpegStage(q),
    )
    return apply_plan(y, DegradationPlan(rounds=(stages,), seed=seed))


def apply_plan(y: GrayImage, plan: DegradationPlan) -> GrayImage:
    """Apply all rounds in order; stage randomness is keyed, not sequential."""
    img = y
    for round_idx, stages in enumerate(plan.rounds):
        for stage_idx, stage in enumerate(stages):
            img = stage.apply(img, _stage_rng(plan.seed, round_idx, stage_idx))
    return img


# ---------------------------------------------------------------------------
# Plan (de)serialization: {"seed": int, "rounds": [[{"type": ..., ...}]]}
# ---------------------------------------------------------------------------


def _stage_from_dict(d: dict, where: str) -> Stage:
    if not isinstance(d, dict) or "type" not in d:
        raise ValueError(f"{where}: stage must be an object with a 'type' key")
    kind = d["type"]
    cls = _STAGE_TYPES.get(kind)
    if cls is None:
        raise ValueError(f"{where}: unknown stage type {kind!r}")
    params = {k: v for k, v in d.items() if k != "type"}
    allowed = set(cls.__dataclass_fields__)
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"{where}: unknown parameters {sorted(unknown)} for {kind}")
    return cls(**params)


def plan_from_json(doc: dict) -> DegradationPlan:
    """Parse a plan document; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ValueError("plan document must be a JSON object")
    unknown = set(doc) - {"seed", "rounds"}
    if unknown:
        raise ValueError(f"plan: unknown keys {sorted(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ValueError(f"plan: seed must be an integer, got {seed!r}")
    rounds_doc = doc.get("rounds")
    if not isinstance(rounds_doc, list) or not rounds_doc:
        raise ValueError("plan: 'rounds' must be a non-empty list")
    rounds = []
    for i, stage_list in enumerate(rounds_doc):
        if not isinstance(stage_list, list):
            raise ValueError(f"plan round {i}: must be a list of stages")
        rounds.append(tuple(_stage_from_dict(s, f"round {i} stage {j}") for j, s in enumerate(stage_list)))
    return DegradationPlan(rounds=tuple(rounds), seed=seed)


def plan_to_json(plan: DegradationPlan) -> dict:
    rounds = []
    for stages in plan.rounds:
        round_doc = []
        for st in stages:
            d = {"type": _STAGE_NAMES[type(st)]}
            d.update({k: getattr(st, k) for k in st.__dataclass_fields__})
            round_doc.append(d)
        rounds.append(round_doc)
    return {"seed": plan.seed, "rounds": rounds}


def load_plan(path) -> DegradationPlan:
    with open(path, "r", encoding="utf-8") as fh:
        return plan_from_json(json.load(fh))


def default_plan(seed: int = 0, order: int = 2) -> DegradationPlan:
    """Blur + decimate + noise + codec, repeated ``order`` times."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    rounds = tuple(
        (
            BlurStage(sigma=1.0 if i == 0 else 0.6),
            DownsampleStage(factor=2),
            GaussianNoiseStage(tau=0.02 if i == 0 else 0.01),
            JpegStage(q=75 if i == 0 else 85),
        )
        for i in range(order)
    )
    return DegradationPlan(rounds=rounds, seed=seed)
