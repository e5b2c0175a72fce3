"""Deterministic chest-radiograph-like phantoms for tests and demos.

Each phantom has a soft background gradient, a bright body ellipse, two dark
lung fields, high-contrast rib bands and a spine column, so edge, texture and
flat-region behavior are all exercised without any clinical data.
"""

from __future__ import annotations

import numpy as np

from .imaging import GrayImage

__all__ = ["make_phantom", "make_corpus"]


def make_phantom(size: int = 256, seed: int = 0, noise: float = 0.0) -> GrayImage:
    """Render one phantom; identical (size, seed, noise) gives identical pixels."""
    if size < 16:
        raise ValueError(f"phantom size must be >= 16, got {size}")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    jit = rng.uniform(-0.05, 0.05, size=8)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx / size - 0.5
    v = yy / size - 0.5

    img = 0.12 + 0.10 * (v + 0.5)  # soft vertical background gradient

    # torso
    body = ((u / (0.42 + jit[0])) ** 2 + (v / (0.46 + jit[1])) ** 2) <= 1.0
    img = np.where(body, 0.55 + 0.08 * (v + 0.5), img)

    # lung fields: darker ellipses left/right of the spine
    for side, j in ((-1, jit[2]), (1, jit[3])):
        cx = side * (0.18 + j)
        lung = (((u - cx) / 0.14) ** 2 + ((v + 0.04) / 0.30) ** 2) <= 1.0
        img = np.where(lung, 0.22 + 0.05 * (v + 0.5), img)

    # rib bands: bright curved stripes across the torso
    phase = 2.0 * np.pi * (v * (5.5 + 2.0 * jit[4]) + 0.35 * u * u)
    ribs = (np.sin(phase) > 0.82) & body
    img = np.where(ribs, np.minimum(img + 0.35, 0.92), img)

    # spine: bright vertical column
    spine = (np.abs(u - jit[5] * 0.2) < 0.035) & body
    img = np.where(spine, 0.85, img)

    if noise > 0.0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return GrayImage(np.clip(img, 0.0, 1.0))


def make_corpus(count: int, size: int = 256, seed: int = 0, noise: float = 0.0) -> list[GrayImage]:
    """A list of ``count`` phantoms with per-image derived seeds."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [make_phantom(size=size, seed=seed + 1000 * i, noise=noise) for i in range(count)]
