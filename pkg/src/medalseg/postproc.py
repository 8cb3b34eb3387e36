"""Probability-guided per-class connected-component cleanup.

Collapses a probability map to labels (argmax where the max probability
clears 0.5), then per class keeps either every top-3 component whose mean
probability is both near the best component's and above a confidence
floor (when at least two qualify), or falls back to the highest-probability
component if it is nearly as large as the biggest, else the biggest alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .volume import LabelMap, ProbabilityMap


@dataclass(frozen=True)
class PostprocParams:
    tau: float = 0.1
    prob_floor: float = 0.86
    size_ratio: float = 0.6
    connectivity: int = 6
    prob_threshold: float = 0.5
    background: int = 0

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0 and 0.0 <= self.size_ratio <= 1.0):
            raise InvalidArgumentError("tau and size_ratio must be in [0, 1]")
        if self.connectivity not in (6, 18, 26):
            raise InvalidArgumentError("connectivity must be 6, 18 or 26")


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def argmax_labelmap(p: ProbabilityMap, threshold: float = 0.5) -> LabelMap:
    """Label = argmax channel + 1 where the channel max clears threshold."""
    pmax = p.data.max(axis=0)
    labels = (p.data.argmax(axis=0) + 1).astype(np.int32)
    labels[pmax < threshold] = 0
    return LabelMap(data=labels[None])


def connected_components(mask: np.ndarray, connectivity: int = 6):
    """Component labeling with a deterministic order.

    Labels are reassigned 1..K by descending size, ties broken by the
    smallest linear voxel index. Returns (labeled grid, sizes list).
    """
    mask = np.asarray(mask)
    if not np.all(np.isin(mask, (0, 1))):
        raise InvalidArgumentError("mask must be binary")
    raw, count = ndimage.label(mask, structure=_STRUCTS[connectivity])
    if count == 0:
        return raw.astype(np.int32), []
    flat = raw.ravel()
    sizes = np.bincount(flat, minlength=count + 1)
    firsts = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(firsts, flat, np.arange(flat.size))
    order = sorted(range(1, count + 1), key=lambda lab: (-int(sizes[lab]), int(firsts[lab])))
    remap = np.zeros(count + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    return remap[raw], [int(sizes[lab]) for lab in order]


def refine_segmentation(p: ProbabilityMap, params: PostprocParams = PostprocParams()) -> LabelMap:
    """Drop spurious components per class; removal-only."""
    lab = argmax_labelmap(p, params.prob_threshold)
    seg = lab.data[0]
    n = p.data.shape[0]
    for l in range(1, n + 1):
        m_l = (seg == l).astype(np.uint8)
        comps, sizes = connected_components(m_l, params.connectivity)
        if not sizes:
            continue
        top = list(range(1, min(3, len(sizes)) + 1))
        prob_l = p.data[l - 1]
        means = {c: float(prob_l[comps == c].mean()) for c in top}
        comp_pmax = max(means.values())
        kept = [c for c in top if (comp_pmax - means[c]) <= params.tau and means[c] > params.prob_floor]
        if len(kept) >= 2:
            keep_mask = np.isin(comps, kept)
        else:
            c_best = max(top, key=lambda c: means[c])  # top is size-ordered: ties go to the larger
            if c_best in top[:2] and sizes[c_best - 1] / sizes[0] > params.size_ratio:
                keep_mask = comps == c_best
            else:
                keep_mask = comps == 1
        seg[(m_l == 1) & ~keep_mask] = params.background
    return LabelMap(data=seg[None])
