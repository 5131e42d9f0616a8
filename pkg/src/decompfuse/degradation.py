"""Masked degradation of a clean scene into two partial views, and the
pixel-intersection targets the decomposition heads are trained against.

Each view keeps the scene where its mask is 1 and shows mid-gray Gaussian
noise elsewhere.  Every pixel is kept by at least one view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError

DEFAULT_NOISE_SIGMA = 0.25
DEFAULT_COVER_FRAC = 0.75
NOISE_MEAN = 0.5


@dataclass(frozen=True)
class MaskPair:
    m1: np.ndarray  # H x W, uint8 in {0, 1}
    m2: np.ndarray
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.m1.shape


@dataclass(frozen=True)
class DegradedPair:
    x1: np.ndarray
    x2: np.ndarray
    masks: MaskPair
    original: np.ndarray


@dataclass(frozen=True)
class DecompositionTargets:
    common_gt: np.ndarray
    unique1_gt: np.ndarray
    unique2_gt: np.ndarray


def _block_mask(flat_on: np.ndarray, grid_h: int, grid_w: int, block: int) -> np.ndarray:
    grid = flat_on.reshape(grid_h, grid_w).astype(np.uint8)
    return np.kron(grid, np.ones((block, block), dtype=np.uint8))


def sample_mask_pair(
    h: int,
    w: int,
    patch: int,
    cover_frac: float = DEFAULT_COVER_FRAC,
    seed: int = 0,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> MaskPair:
    """Draw two patch-aligned block masks with joint coverage.

    ``m1`` switches on ``round(cover_frac * n)`` of the ``n`` blocks.  ``m2``
    is on wherever ``m1`` is off, plus enough of ``m1``'s blocks to reach the
    same coverage, so ``m1 + m2 >= 1`` by construction.  The roles are then
    swapped on a fair coin so neither view is systematically the "free" one.
    Below full coverage the overlap and both exclusive regions are non-empty.
    """
    if not 0.5 <= cover_frac <= 1.0:
        raise ParameterError(f"cover_frac must be in [0.5, 1] for joint coverage, got {cover_frac}")
    if noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if patch < 1 or h % patch or w % patch:
        raise ContractError(f"image {h}x{w} is not divisible by patch {patch}")
    grid_h, grid_w = h // patch, w // patch
    n = grid_h * grid_w
    rng = np.random.default_rng(seed)

    k1 = int(round(cover_frac * n))
    if k1 >= n:
        ones = np.ones((h, w), dtype=np.uint8)
        return MaskPair(ones, ones.copy(), float(noise_sigma), seed)
    if n < 3 or k1 < 2:
        raise ParameterError(
            f"a {grid_h}x{grid_w} block grid at cover_frac={cover_frac} cannot hold "
            "overlapping and exclusive regions at once"
        )

    order = rng.permutation(n)
    on1 = np.zeros(n, dtype=bool)
    on1[order[:k1]] = True
    # m2 must cover the complement of m1, then borrow from m1 to reach its own
    # coverage; at least one shared block keeps the masks non-complementary.
    extra = min(max(2 * k1 - n, 1), k1 - 1)
    shared = rng.choice(order[:k1], size=extra, replace=False)
    on2 = ~on1
    on2[shared] = True

    if rng.random() < 0.5:
        on1, on2 = on2, on1
    return MaskPair(
        _block_mask(on1, grid_h, grid_w, patch),
        _block_mask(on2, grid_h, grid_w, patch),
        float(noise_sigma),
        seed,
    )


def apply_degradation(x: np.ndarray, masks: MaskPair) -> DegradedPair:
    """Build ``x^i = M_i * x + (1 - M_i) * n_i`` with independent noise per view."""
    if x.shape[:2] != masks.shape:
        raise ContractError(f"mask shape {masks.shape} does not match image shape {x.shape[:2]}")
    rng = np.random.default_rng([masks.seed, 0x5EED])
    views = []
    for m in (masks.m1, masks.m2):
        noise = np.clip(rng.normal(NOISE_MEAN, masks.noise_sigma, size=x.shape), 0.0, 1.0)
        keep = m[..., None].astype(bool)
        views.append(np.where(keep, x, noise))
    return DegradedPair(views[0], views[1], masks, x)


def decomposition_targets(pair: DegradedPair) -> DecompositionTargets:
    m1 = pair.masks.m1.astype(bool)[..., None]
    m2 = pair.masks.m2.astype(bool)[..., None]
    x = pair.original
    zero = np.zeros_like(x)
    return DecompositionTargets(
        common_gt=np.where(m1 & m2, x, zero),
        unique1_gt=np.where(m1 & ~m2, x, zero),
        unique2_gt=np.where(~m1 & m2, x, zero),
    )


def contact_sheet(pair: DegradedPair, targets: DecompositionTargets) -> np.ndarray:
    """Side-by-side debug strip: x, x1, x2, common, unique1, unique2."""
    tiles = [pair.original, pair.x1, pair.x2, targets.common_gt, targets.unique1_gt, targets.unique2_gt]
    h = tiles[0].shape[0]
    sep = np.ones((h, 2, tiles[0].shape[2]))
    out = []
    for t in tiles:
        out.extend([t, sep])
    return np.concatenate(out[:-1], axis=1)
