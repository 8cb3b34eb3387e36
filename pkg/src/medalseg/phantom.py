"""Bundled synthetic phantoms used by tests, the benchmark and the demo
service session. Spheres are placed at the gray level the toy backbone's
class-slot detectors are tuned to, so text queries are genuinely
discriminative at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import MultiChannelMask, Volume

SLOTS = 24


def slot_gray(class_id: int) -> float:
    """Calibrated normalized gray level for a class id (0-255 scale)."""
    slot = (class_id - 1) % SLOTS
    return 255.0 * (slot + 1) / (SLOTS + 1)


def _sphere(dims, center, radius) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= radius * radius


@dataclass
class PhantomCase:
    volume: Volume
    gt: MultiChannelMask
    prompts: list
    class_ids: list
    class_names: list


# (sentence, MRI class id, center, radius) — ids from the bundled corpus
_MRI_SPHERES = [
    ("T2 MRI of the liver", "Liver", 5, (20, 20, 30), 11),
    ("Abdominal MRI showing splenic tissue", "Spleen", 7, (44, 42, 34), 10),
    ("Brain MRI, axial view", "Brain", 1, (40, 18, 18), 8),
]


def build_phantom(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0)) -> PhantomCase:
    """Three-sphere MRI phantom with one sphere per text prompt."""
    data = np.zeros(dims)
    channels = []
    prompts, ids, names = [], [], []
    for sentence, name, cid, center, radius in _MRI_SPHERES:
        mask = _sphere(dims, center, radius)
        data[mask] = slot_gray(cid)
        channels.append(mask.astype(np.uint8))
        prompts.append({"sentence": sentence, "instance_label": 0})
        ids.append(cid)
        names.append(name)
    vol = Volume(data=data, spacing=spacing, modality="MRI")
    gt = MultiChannelMask(data=np.stack(channels), channel_meta=list(ids))
    return PhantomCase(volume=vol, gt=gt, prompts=prompts, class_ids=ids, class_names=names)


def gt_scribbles(gt: MultiChannelMask, iterations: int = 2) -> MultiChannelMask:
    """Eroded ground truth: conservative interior strokes per class."""
    eroded = np.stack([
        ndimage.binary_erosion(c, iterations=iterations, border_value=0).astype(np.uint8)
        for c in gt.data
    ])
    return MultiChannelMask(data=eroded, channel_meta=list(gt.channel_meta))


# CT anatomy names in corpus id order 1..24
CT_CLASSES = [
    "Aorta", "Bladder", "Brain", "Brainstem", "Colon", "Duodenum",
    "Esophagus", "Gallbladder", "Heart", "Inferior vena cava",
    "Left adrenal gland", "Left kidney", "Left lung", "Liver",
    "Pancreas", "Portal vein", "Prostate", "Right adrenal gland",
    "Right kidney", "Right lung", "Small bowel", "Spleen",
    "Stomach", "Trachea",
]

_CT_CENTERS = [(14, 14, 14), (34, 14, 14), (14, 34, 14), (34, 34, 14), (14, 14, 34), (34, 14, 34)]


def bench_volume(dims=(48, 48, 48), spacing=(1.0, 1.0, 1.0)):
    """CT bench phantom: six spheres in HU tuned to the soft-tissue window,
    plus prompt sentences for all 24 CT anatomy classes."""
    data = np.full(dims, -1000.0)  # air background windows to 0
    for cid, center in zip(range(1, len(_CT_CENTERS) + 1), _CT_CENTERS):
        mask = _sphere(dims, center, 7)
        hu = slot_gray(cid) / 255.0 * 400.0 - 160.0
        data[mask] = hu
    vol = Volume(data=data, spacing=spacing, modality="CT")
    prompts = [{"sentence": f"CT scan of the {name}", "instance_label": 0} for name in CT_CLASSES]
    return vol, prompts
