"""Training loss (BCE + squared-denominator Dice, with analytic gradient)
and evaluation metrics: DSC, normalized surface distance, instance F1 at
a 0.5 overlap threshold, and mean DSC over true-positive instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatchError

EPS = 1e-7


@dataclass
class LossValue:
    total: float
    bce: float
    dice: float
    gradient: np.ndarray | None = None


def bce_dice_loss(p: np.ndarray, s: np.ndarray, with_gradient: bool = False) -> LossValue:
    """Combined loss over an (N, ...) prediction/target pair.

    BCE is normalized by the full element count (classes x voxels); the
    Dice term uses the squared denominator and global sums. Predictions
    are clamped to [EPS, 1-EPS]; the gradient is zero where the clamp is
    active.
    """
    p = np.asarray(p, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if p.shape != s.shape:
        raise DimensionMismatchError(f"shape mismatch {p.shape} vs {s.shape}")
    clamped = (p < EPS) | (p > 1.0 - EPS)
    pc = np.clip(p, EPS, 1.0 - EPS)

    bce = float(-np.mean(s * np.log(pc) + (1.0 - s) * np.log(1.0 - pc)))
    inter = float((pc * s).sum())
    denom = float((pc * pc).sum() + (s * s).sum())
    dice = 1.0 - 2.0 * inter / denom

    grad = None
    if with_gradient:
        g_bce = -(s / pc - (1.0 - s) / (1.0 - pc)) / p.size
        g_dice = -2.0 * (s * denom - inter * 2.0 * pc) / denom**2
        grad = g_bce + g_dice
        grad[clamped] = 0.0
    return LossValue(total=bce + dice, bce=bce, dice=dice, gradient=grad)


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """2|a n b| / (|a| + |b|); empty vs empty counts as perfect."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


_FACES = ndimage.generate_binary_structure(3, 1)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with at least one 6-neighbor outside it."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.zeros_like(mask)
    interior = ndimage.binary_erosion(mask, structure=_FACES, border_value=0)
    return mask & ~interior


def nsd(a: np.ndarray, b: np.ndarray, spacing, tolerance: float = 1.0) -> float:
    """Mean of the two boundary fractions lying within tolerance (mm)."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    ba, bb = boundary_voxels(a), boundary_voxels(b)
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    frac_a = float((dist_to_b[ba] <= tolerance).mean())
    frac_b = float((dist_to_a[bb] <= tolerance).mean())
    return 0.5 * (frac_a + frac_b)


def instance_f1_dsctp(gt: np.ndarray, pred: np.ndarray, overlap_threshold: float = 0.5):
    """Greedy one-to-one instance matching by descending pairwise DSC.

    A matched pair counts as TP when its DSC exceeds the threshold.
    Candidate pairs above threshold are matched best-first; ties break on
    (gt id, pred id) so results are deterministic. Returns
    (f1, dsc_tp, counts dict).
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise DimensionMismatchError(f"shape mismatch {gt.shape} vs {pred.shape}")
    gt_ids = [int(i) for i in np.unique(gt) if i > 0]
    pr_ids = [int(i) for i in np.unique(pred) if i > 0]

    pairs = []
    for g in gt_ids:
        gm = gt == g
        for q in pr_ids:
            d = dsc(gm, pred == q)
            if d > overlap_threshold:
                pairs.append((d, g, q))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))

    used_g, used_p, matched = set(), set(), []
    for d, g, q in pairs:
        if g in used_g or q in used_p:
            continue
        used_g.add(g)
        used_p.add(q)
        matched.append(d)

    tp = len(matched)
    fp = len(pr_ids) - tp
    fn = len(gt_ids) - tp
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom > 0 else 1.0
    dsc_tp = float(np.mean(matched)) if matched else 0.0
    return f1, dsc_tp, {"tp": tp, "fp": fp, "fn": fn}


@dataclass
class MetricReport:
    class_id: int
    class_name: str
    dsc: float
    nsd: float
    f1: float
    dsc_tp: float
    tp: int
    fp: int
    fn: int


def evaluate_labelmaps(gt_labels: np.ndarray, pred_labels: np.ndarray, spacing,
                       class_ids, class_names=None, tolerance: float = 1.0):
    """Per-class semantic + instance metrics between two integer label maps.

    Instances per class are that class's connected components (6-conn).
    """
    from .postproc import connected_components

    if class_names is None:
        class_names = [str(c) for c in class_ids]
    rows = []
    for cid, cname in zip(class_ids, class_names):
        g = (gt_labels == cid).astype(np.uint8)
        q = (pred_labels == cid).astype(np.uint8)
        g_inst, _ = connected_components(g)
        q_inst, _ = connected_components(q)
        f1, dtp, counts = instance_f1_dsctp(g_inst, q_inst)
        rows.append(MetricReport(
            class_id=int(cid), class_name=cname,
            dsc=dsc(g, q), nsd=nsd(g, q, spacing, tolerance),
            f1=f1, dsc_tp=dtp, **counts))
    return rows
