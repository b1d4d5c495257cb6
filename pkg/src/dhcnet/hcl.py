"""Local-region shuffling augmentation and its granularity schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass(frozen=True)
class RegionSpec:
    corner: str
    side_h: int
    side_w: int
    sigma: float
    height: int
    width: int

    def __post_init__(self):
        if self.corner not in CORNERS:
            raise ValueError(f"unknown corner {self.corner!r}")

    @property
    def top(self) -> int:
        return 0 if self.corner.startswith("top") else self.height - self.side_h

    @property
    def left(self) -> int:
        return 0 if self.corner.endswith("left") else self.width - self.side_w

    @property
    def slices(self) -> Tuple[slice, slice]:
        return slice(self.top, self.top + self.side_h), slice(self.left, self.left + self.side_w)


@dataclass
class AugmentedEntry:
    k: int
    n: int
    permutation: np.ndarray
    image: np.ndarray
    target_last_stage: int
    region: RegionSpec


@dataclass
class AugmentedSet:
    source_id: int
    entries: List[AugmentedEntry] = field(default_factory=list)


def snapped_side(dim: int, sigma: float, multiple: int) -> int:
    side = math.floor(math.sqrt(sigma) * dim + 1e-9)
    return side - side % multiple


def select_region(height: int, width: int, sigma: float, rng: np.random.Generator,
                  m: int = 3, corner: Optional[str] = None) -> RegionSpec:
    """Corner-anchored region covering ``sigma`` of the image.

    Sides are snapped down to a multiple of ``2**m`` so that every
    granularity ``n = 2**k, k <= m`` divides them evenly.
    """
    if not 0 < sigma <= 1:
        raise ValueError(f"sigma must lie in (0, 1], got {sigma}")
    mult = 2 ** m
    side_h, side_w = snapped_side(height, sigma, mult), snapped_side(width, sigma, mult)
    if side_h < mult or side_w < mult:
        raise ValueError(f"a {height}x{width} image cannot host a sigma={sigma} region divisible by {mult}")
    if corner is None:
        corner = CORNERS[int(rng.integers(4))]
    return RegionSpec(corner, side_h, side_w, float(sigma), height, width)


def split_patches(block: np.ndarray, n: int) -> np.ndarray:
    """C x h x w -> (n*n) x C x (h/n) x (w/n), row-major patch order."""
    c, h, w = block.shape
    ph, pw = h // n, w // n
    return block.reshape(c, n, ph, n, pw).transpose(1, 3, 0, 2, 4).reshape(n * n, c, ph, pw)


def merge_patches(patches: np.ndarray, n: int) -> np.ndarray:
    nn_, c, ph, pw = patches.shape
    return patches.reshape(n, n, c, ph, pw).transpose(2, 0, 3, 1, 4).reshape(c, n * ph, n * pw)


def shuffle_region(image, region: RegionSpec, n: int, rng: Optional[np.random.Generator] = None,
                   permutation: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Split the region into n x n patches and reinsert them permuted.

    Output patch slot ``i`` receives source patch ``permutation[i]``.
    """
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must be C x H x W, got {img.shape}")
    if region.side_h % n or region.side_w % n:
        raise ValueError(f"region {region.side_h}x{region.side_w} is not divisible by n={n}")
    if permutation is None:
        if rng is None:
            raise ValueError("either rng or permutation is required")
        permutation = rng.permutation(n * n)
    perm = np.asarray(permutation, dtype=int)
    if sorted(perm.tolist()) != list(range(n * n)):
        raise ValueError("permutation is not a bijection on the patch indices")
    ys, xs = region.slices
    out = img.copy()
    patches = split_patches(img[:, ys, xs], n)
    out[:, ys, xs] = merge_patches(patches[perm], n)
    return out, perm


def unshuffle_region(image: np.ndarray, region: RegionSpec, n: int, permutation) -> np.ndarray:
    inv = np.argsort(np.asarray(permutation))
    return shuffle_region(image, region, n, permutation=inv)[0]


def granularity_schedule(m: int, num_stages: int = 4) -> List[Tuple[int, int, int]]:
    """Map each k in 1..m to (k, 2**k, last stage to run).

    Fine granularities (top third of k) go through all stages, the middle third
    stops one stage early, the coarsest third two stages early.
    """
    if m < 1 or num_stages < 3:
        raise ValueError(f"need m >= 1 and at least 3 stages, got m={m}, stages={num_stages}")
    third, two_thirds = math.ceil(m / 3), math.ceil(2 * m / 3)
    intervals = [
        (1, third, num_stages - 2),
        (third + 1, two_thirds, num_stages - 1),
        (two_thirds + 1, m, num_stages),
    ]
    for lo, hi, stage in intervals:
        if lo > hi:
            raise ValueError(
                f"m={m} leaves the interval for stage {stage} empty ([{lo}, {hi}]); "
                "every depth needs at least one granularity, so m must be >= 3")
    out = []
    for lo, hi, stage in intervals:
        out.extend((k, 2 ** k, stage) for k in range(lo, hi + 1))
    return out


def augment(image, source_id: int, sigma: float, m: int, rng: np.random.Generator,
            num_stages: int = 4, independent_regions: bool = False) -> AugmentedSet:
    """Build the m shuffled variants of one image."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    _, h, w = img.shape
    region = select_region(h, w, sigma, rng, m)
    out = AugmentedSet(source_id)
    for k, n, stage in granularity_schedule(m, num_stages):
        if independent_regions and out.entries:
            region = select_region(h, w, sigma, rng, m)
        shuffled, perm = shuffle_region(img, region, n, rng)
        out.entries.append(AugmentedEntry(k, n, perm, shuffled, stage, region))
    return out


def mixup(image_a, image_b, label_a, label_b, lam: float):
    """Convex blend of two images and their (one-hot) labels."""
    a = np.asarray(getattr(image_a, "data", image_a), dtype=np.float64)
    b = np.asarray(getattr(image_b, "data", image_b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mixup shapes differ: {a.shape} vs {b.shape}")
    la, lb = np.asarray(label_a, dtype=np.float64), np.asarray(label_b, dtype=np.float64)
    if la.shape != lb.shape:
        raise ValueError(f"mixup label shapes differ: {la.shape} vs {lb.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must lie in [0, 1], got {lam}")
    return lam * a + (1 - lam) * b, lam * la + (1 - lam) * lb
