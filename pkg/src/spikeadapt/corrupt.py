"""Synthetic weather corruption: multi-scale noise clouds and diamond-square fog.

All randomness comes from SplitMix64 so fields are reproducible bit for bit
on any platform. The k-th output (k = 1, 2, ...) of a stream seeded with
``seed`` is::

    z = (seed + k * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
    z = z ^ (z >> 31)

and a uniform double in [0, 1) is ``(z >> 11) * 2**-53``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1
KINDS = ("cloudy", "foggy", "none")


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset+1 .. offset+count`` of the SplitMix64 stream as uint64."""
    k = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + k * GOLDEN
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix:
    """Sequential uniform draws from one SplitMix64 stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.drawn = 0

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        bits = splitmix64(self.seed, n, self.drawn)
        self.drawn += n
        u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a sub-stream, e.g. ``derive_seed(root, image_index)``."""
    s = int(seed) & MASK64
    for p in path:
        s = int(splitmix64(s ^ (int(p) & MASK64), 1)[0])
    return s


def _minmax(field: np.ndarray) -> np.ndarray:
    lo, hi = field.min(), field.max()
    if hi == lo:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def _is_pow2(n: int) -> bool:
    return n >= 2 and n & (n - 1) == 0


def cloud_field(n: int, seed: int, normalize: bool = True) -> np.ndarray:
    """Sum of bilinearly upsampled uniform noise at scales 2, 4, ..., n.

    Scale ``2**s`` is weighted by ``2**-s`` so the coarse octaves dominate.
    """
    if not _is_pow2(n):
        raise ValueError(f"cloud field size must be a power of two >= 2, got {n}")
    rng = SplitMix(seed)
    field = np.zeros((n, n))
    for s in range(1, int(np.log2(n)) + 1):
        size = 2**s
        noise = rng.uniform((size, size))
        if size != n:
            noise = zoom(noise, n / size, order=1, grid_mode=False)
        field += noise / size
    return _minmax(field) if normalize else field


def diamond_square(side: int, roughness: float, seed: int, normalize: bool = True) -> np.ndarray:
    """Midpoint-displacement fractal on a ``side x side`` grid, side = 2**k + 1.

    Corners are uniform in [0, 1). At level ``j`` (1-based) every new point is
    the mean of its neighbours plus uniform noise in ``[-r**j, r**j]``. Border
    points average only their two neighbours along the border, so with zero
    roughness the field is the exact bilinear interpolation of the corners.
    """
    k = side - 1
    if side < 3 or not _is_pow2(k):
        raise ValueError(f"diamond-square side must be 2**k + 1, got {side}")
    if not 0 <= roughness < 1:
        raise ValueError("roughness must lie in [0, 1)")
    rng = SplitMix(seed)
    g = np.zeros((side, side))
    g[0, 0], g[0, k], g[k, 0], g[k, k] = rng.uniform(4)
    step, level = k, 1
    while step > 1:
        half = step // 2
        amp = roughness**level
        # square step: centres of each cell
        c = (g[:-1:step, :-1:step] + g[:-1:step, step::step] + g[step::step, :-1:step] + g[step::step, step::step]) / 4
        g[half::step, half::step] = c + amp * rng.uniform(c.shape, -1.0, 1.0)
        # diamond step: edge midpoints of each cell
        for r0 in (0, half):
            c0 = half - r0
            rows = np.arange(r0, side, half * 2 if r0 == 0 else step)
            cols = np.arange(c0, side, step)
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            total = np.zeros(rr.shape)
            count = np.zeros(rr.shape)
            border_row = (rr == 0) | (rr == k)
            border_col = (cc == 0) | (cc == k)
            for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
                r, c_ = rr + dr, cc + dc
                ok = (r >= 0) & (r <= k) & (c_ >= 0) & (c_ <= k)
                # border points only look along their border
                ok &= ~(border_row & (dr != 0)) & ~(border_col & (dc != 0))
                total += np.where(ok, g[np.clip(r, 0, k), np.clip(c_, 0, k)], 0.0)
                count += ok
            vals = total / count + amp * rng.uniform(rr.shape, -1.0, 1.0)
            g[rr, cc] = vals
        step, level = half, level + 1
    return _minmax(g) if normalize else g


@dataclass
class CorruptionSpec:
    kind: str = "cloudy"
    beta: float = 0.5
    seed: int = 0
    roughness: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"corruption kind must be one of {KINDS}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("blend beta must lie in [0, 1]")
        if not 0.0 <= self.roughness < 1.0:
            raise ValueError("roughness must lie in [0, 1)")


def weather_field(kind: str, h: int, w: int, seed: int, roughness: float = 0.5) -> np.ndarray:
    n = 2
    while n < max(h, w):
        n *= 2
    if kind == "cloudy":
        return cloud_field(n, seed)[:h, :w]
    if kind == "foggy":
        return 0.5 + 0.5 * diamond_square(n + 1, roughness, seed)[:h, :w]
    raise ValueError(f"no field for corruption kind {kind!r}")


def apply_corruption(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Alpha-composite a weather field over an image with values in [0, 1].

    ``image`` is (H, W) or channels-first (C, H, W); the field is shared by
    all channels.
    """
    image = np.asarray(image, dtype=float)
    if spec.kind == "none" or spec.beta == 0.0:
        return image.copy()
    h, w = image.shape[-2:]
    field = weather_field(spec.kind, h, w, spec.seed, spec.roughness)
    return (1.0 - spec.beta) * image + spec.beta * field


def corrupt_batch(images: np.ndarray, spec: CorruptionSpec, start_index: int = 0) -> np.ndarray:
    """Corrupt each image with its own field, seeded from ``(spec.seed, index)``."""
    out = np.empty(images.shape, dtype=float)
    for i, img in enumerate(images):
        sub = CorruptionSpec(spec.kind, spec.beta, derive_seed(spec.seed, start_index + i), spec.roughness)
        out[i] = apply_corruption(img, sub)
    return out
