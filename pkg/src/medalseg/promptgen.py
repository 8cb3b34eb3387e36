"""Spatial prompt simulation: stochastic block corruption of class masks.

Turns clean multi-channel masks into realistic coarse prompts by dropping
and adding block-shaped regions on a coarse grid, optionally zeroing whole
channels or the entire prompt. All randomness flows through an explicit
numpy Generator with a fixed draw order (documented on
generate_spatial_prompts) so runs are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .volume import MultiChannelMask


@dataclass(frozen=True)
class PromptGenParams:
    p_drop_range: tuple[float, float] = (0.0, 0.0)
    p_add_range: tuple[float, float] = (0.0, 0.0)
    p_chan_zero: float = 0.0
    p_zero: float = 0.0
    block_sizes: tuple = ((4, 4, 4), (8, 8, 8))
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.p_drop_range, self.p_add_range):
            if not (0.0 <= lo <= hi <= 1.0):
                raise InvalidArgumentError(f"bad probability range [{lo}, {hi}]")
        for p in (self.p_chan_zero, self.p_zero):
            if not 0.0 <= p <= 1.0:
                raise InvalidArgumentError(f"probability {p} outside [0, 1]")
        if not self.block_sizes:
            raise InvalidArgumentError("block size set must be nonempty")
        for b in self.block_sizes:
            if len(b) != 3 or any(int(x) < 1 for x in b):
                raise InvalidArgumentError(f"block dims must be 3 integers >= 1, got {b}")


@dataclass
class SpatialPromptPair:
    """S_f: (1,H,W,D) union prompt; S_p: (N,H,W,D) per-class prompts."""

    s_f: np.ndarray
    s_p: np.ndarray

    def __post_init__(self):
        if self.s_f.shape[0] != 1 or self.s_f.shape[1:] != self.s_p.shape[1:]:
            raise InvalidArgumentError("S_f must be (1,H,W,D) on the same grid as S_p")
        for a in (self.s_f, self.s_p):
            if not np.all(np.isin(a, (0, 1))):
                raise InvalidArgumentError("prompts must be strictly binary")


def channel_mask(n: int, p_chan_zero: float, rng: np.random.Generator) -> np.ndarray:
    """Per-channel keep vector: each entry 0 with probability p_chan_zero."""
    if n < 1:
        raise InvalidArgumentError("need at least one channel")
    return (rng.random(n) >= p_chan_zero).astype(np.uint8)


def grid_dims(dims, block):
    return tuple(-(-d // b) for d, b in zip(dims, block))


def block_grid_masks(dims, block, p_d: float, p_a: float, rng: np.random.Generator):
    """Bernoulli drop/add cell masks on the ceil(dim/block) grid; disjoint."""
    g = grid_dims(dims, block)
    b_drop = rng.random(g) < p_d
    b_add = (rng.random(g) < p_a) & ~b_drop
    return b_drop, b_add


def upsample_block_mask(grid_mask: np.ndarray, block, dims) -> np.ndarray:
    """Replicate each grid cell over its block; edge blocks truncated."""
    out = grid_mask.astype(np.uint8)
    for ax, b in enumerate(block):
        out = np.repeat(out, b, axis=ax)
    return out[tuple(slice(0, d) for d in dims)]


def assign_blocks_to_channels(block_mask: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Route each true cell to exactly one uniformly random channel."""
    out = np.zeros((n,) + block_mask.shape, dtype=np.uint8)
    cells = np.argwhere(block_mask)
    if len(cells):
        chans = rng.integers(0, n, size=len(cells))
        out[(chans, *cells.T)] = 1
    return out


def generate_spatial_prompts(m: MultiChannelMask, params: PromptGenParams, rng: np.random.Generator | None = None) -> SpatialPromptPair:
    """Corrupt clean masks into a prompt pair.

    Draw order (fixed contract): (1) the all-zero gate uniform; (2) N keep
    uniforms for channel zeroing; then only if any drop/add max > 0:
    (3) block-size choice, (4) p_d then p_a uniforms, (5) drop-cell grid,
    (6) add-cell grid, (7) channel assignment for the added cells.
    """
    if rng is None:
        rng = np.random.default_rng(params.seed)
    data = m.data.astype(np.uint8)
    n, *dims = data.shape
    dims = tuple(dims)

    if rng.random() < params.p_zero:
        return SpatialPromptPair(
            s_f=np.zeros((1,) + dims, dtype=np.uint8),
            s_p=np.zeros((n,) + dims, dtype=np.uint8),
        )

    keep = channel_mask(n, params.p_chan_zero, rng)
    s_p = data * keep[:, None, None, None]
    s_f = (s_p.sum(axis=0) > 0).astype(np.uint8)

    if params.p_drop_range[1] > 0 or params.p_add_range[1] > 0:
        block = tuple(int(x) for x in params.block_sizes[rng.integers(len(params.block_sizes))])
        p_d = rng.uniform(*params.p_drop_range)
        p_a = rng.uniform(*params.p_add_range)
        b_drop, b_add = block_grid_masks(dims, block, p_d, p_a, rng)
        u_drop = upsample_block_mask(b_drop, block, dims)
        u_add = upsample_block_mask(b_add, block, dims)
        s_f = ((s_f * (1 - u_drop)) | u_add).astype(np.uint8)
        # kept blocks retain every channel; only additions pick one channel
        c_keep = upsample_block_mask(~b_drop, block, dims)[None]
        c_add_cells = assign_blocks_to_channels(b_add, n, rng)
        c_add = np.stack([upsample_block_mask(c, block, dims) for c in c_add_cells])
        s_p = ((s_p * c_keep) | c_add).astype(np.uint8)

    return SpatialPromptPair(s_f=(s_f > 0).astype(np.uint8)[None], s_p=(s_p > 0).astype(np.uint8))
