"""Core volumetric grid types, intensity normalization and resampling.

Grids follow the package-wide layout convention: scalar volumes are
(H, W, D) arrays, channelled grids are (N, H, W, D), label maps are
(1, H, W, D). Spacing is millimetres per voxel along (H, W, D).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

MODALITIES = ("CT", "MRI", "PET", "US", "Microscopy")

RAW = "raw"
NORMALIZED = "normalized-0-255"

# Default practical clamp for adjusted spacings (mm), overridable per class.
DEFAULT_SPACING_BOUNDS = (0.3, 6.0)


@dataclass(frozen=True)
class CTWindow:
    """Hounsfield window. Soft tissue (400, 40) is the usual default."""

    width: float
    level: float


SOFT_TISSUE_WINDOW = CTWindow(400.0, 40.0)


@dataclass
class Volume:
    """A scalar voxel grid with physical spacing and modality metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: str
    intensity_domain: str = RAW

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvalidArgumentError(f"volume must be a nonempty 3-D grid, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidArgumentError(f"spacing must be three positive values, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise InvalidArgumentError(f"unknown modality {self.modality!r}")
        if self.intensity_domain not in (RAW, NORMALIZED):
            raise InvalidArgumentError(f"unknown intensity domain {self.intensity_domain!r}")
        if self.intensity_domain == NORMALIZED:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < 0.0 or hi > 255.0:
                raise InvalidArgumentError(f"normalized volume has values outside [0, 255]: [{lo}, {hi}]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class MultiChannelMask:
    """Binary per-class grid (N, H, W, D)."""

    data: np.ndarray
    channel_meta: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise InvalidArgumentError(f"mask must be (N, H, W, D) with N >= 1, got {self.data.shape}")
        vals = np.unique(self.data)
        if not np.all(np.isin(vals, (0, 1))):
            raise InvalidArgumentError("mask values must be strictly binary")
        if not self.channel_meta:
            self.channel_meta = list(range(self.data.shape[0]))
        if len(self.channel_meta) != self.data.shape[0]:
            raise InvalidArgumentError("channel_meta length must match channel count")


@dataclass
class ProbabilityMap:
    """Per-class probabilities (N, H, W, D), values in [0, 1]."""

    data: np.ndarray
    channel_meta: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise InvalidArgumentError(f"probability map must be (N, H, W, D), got {self.data.shape}")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise InvalidArgumentError("probabilities must lie in [0, 1]")
        if not self.channel_meta:
            self.channel_meta = list(range(self.data.shape[0]))


@dataclass
class LabelMap:
    """Integer segmentation (1, H, W, D); 0 is background, 1..N are classes."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[0] != 1:
            raise InvalidArgumentError(f"label map must be (1, H, W, D), got {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            self.data = self.data.astype(np.int32)
        if self.data.min() < 0:
            raise InvalidArgumentError("labels must be nonnegative")


@dataclass(frozen=True)
class ResampleSpec:
    """Target spacing / patch pair for the dynamic spacing rule."""

    target_spacing: tuple[float, float, float]
    patch: tuple[int, int, int]
    alpha: float = 1.0
    interpolation: str = "linear"

    def __post_init__(self):
        if any(t <= 0 for t in self.target_spacing) or self.alpha <= 0:
            raise InvalidArgumentError("target spacing and alpha must be positive")


def normalize_intensity(v: Volume, window: CTWindow | None = None) -> Volume:
    """Map intensities to [0, 255].

    CT uses a linear Hounsfield window (soft tissue by default); other
    modalities are truncated at the 0.5th/99.5th percentiles and rescaled.
    Non-CT inputs already inside [0, 255] pass through untouched.
    """
    if v.intensity_domain != RAW:
        raise InvalidArgumentError("normalize_intensity expects a raw-intensity volume")
    if v.data.size == 0:
        raise InvalidArgumentError("empty volume")
    if window is not None and v.modality != "CT":
        raise InvalidArgumentError(f"CT window given for modality {v.modality}")

    data = np.asarray(v.data, dtype=np.float64)
    if v.modality == "CT":
        win = window or SOFT_TISSUE_WINDOW
        lo = win.level - win.width / 2.0
        hi = win.level + win.width / 2.0
        out = np.clip((data - lo) / (hi - lo), 0.0, 1.0) * 255.0
    else:
        if data.min() >= 0.0 and data.max() <= 255.0:
            return replace(v, data=v.data, intensity_domain=NORMALIZED)
        p_lo, p_hi = np.percentile(data, (0.5, 99.5))
        if p_hi <= p_lo:
            # degenerate percentile range (constant volume): background only
            out = np.zeros_like(data)
        else:
            out = (np.clip(data, p_lo, p_hi) - p_lo) / (p_hi - p_lo) * 255.0
    return replace(v, data=out, intensity_domain=NORMALIZED)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(int)


def resampled_dims(dims: Sequence[int], spacing: Sequence[float], new_spacing: Sequence[float]) -> tuple[int, ...]:
    """Output dims for a spacing change: round(d * s / t), at least 1."""
    d = np.asarray(dims, dtype=np.float64)
    s = np.asarray(spacing, dtype=np.float64)
    t = np.asarray(new_spacing, dtype=np.float64)
    return tuple(int(max(1, n)) for n in _round_half_away(d * s / t))


def resample_grid(data: np.ndarray, out_dims: Sequence[int], order: int) -> np.ndarray:
    """Cell-centered resample of a 3-D grid to out_dims (order 0 or 1)."""
    out_dims = tuple(int(n) for n in out_dims)
    if tuple(data.shape) == out_dims:
        return data.copy()
    zoom = [o / i for o, i in zip(out_dims, data.shape)]
    out = ndimage.zoom(data, zoom, order=order, mode="nearest", grid_mode=True)
    if out.shape != out_dims:  # pragma: no cover - zoom rounding guard
        pad = [(0, max(0, n - m)) for n, m in zip(out_dims, out.shape)]
        out = np.pad(out, pad, mode="edge")[tuple(slice(0, n) for n in out_dims)]
    return out


def resample_channels(data: np.ndarray, spacing: Sequence[float], new_spacing: Sequence[float], order: int) -> np.ndarray:
    """Resample each channel of an (N, H, W, D) grid."""
    out_dims = resampled_dims(data.shape[1:], spacing, new_spacing)
    return np.stack([resample_grid(np.asarray(c), out_dims, order) for c in data])


def resample(obj, new_spacing: Sequence[float], spacing: Sequence[float] | None = None):
    """Resample to new_spacing: Volumes trilinearly, masks and labels nearest.

    MultiChannelMask and LabelMap do not carry spacing, so their current
    spacing must be passed explicitly.
    """
    new_spacing = tuple(float(t) for t in new_spacing)
    if any(t <= 0 for t in new_spacing):
        raise InvalidArgumentError("new spacing must be positive")

    if isinstance(obj, Volume):
        out_dims = resampled_dims(obj.dims, obj.spacing, new_spacing)
        data = resample_grid(np.asarray(obj.data, dtype=np.float64), out_dims, order=1)
        return replace(obj, data=data, spacing=new_spacing)

    if spacing is None:
        raise InvalidArgumentError("current spacing required to resample a mask or label map")
    if isinstance(obj, MultiChannelMask):
        data = resample_channels(obj.data.astype(np.uint8), spacing, new_spacing, order=0)
        return MultiChannelMask(data=data, channel_meta=list(obj.channel_meta))
    if isinstance(obj, LabelMap):
        data = resample_channels(obj.data, spacing, new_spacing, order=0)
        return LabelMap(data=data)
    raise InvalidArgumentError(f"cannot resample object of type {type(obj).__name__}")


def dynamic_target_spacing(
    current_spacing: Sequence[float],
    region_dims: Sequence[float],
    spec: ResampleSpec,
    bounds: tuple[float, float] = DEFAULT_SPACING_BOUNDS,
) -> tuple[float, float, float]:
    """Adjusted per-axis spacing for the smallest segmentation target.

    region_dims are the voxel dims of the reference region's bounding box
    measured on the target-spacing grid. Per axis, the candidate spacing is
    patch * alpha * target / region; if the current spacing is coarser than
    the target the result is capped below by the target, otherwise capped
    above by it. The result is clamped to the practical bounds.
    """
    s = np.asarray(current_spacing, dtype=np.float64)
    d = np.asarray(region_dims, dtype=np.float64)
    t = np.asarray(spec.target_spacing, dtype=np.float64)
    p = np.asarray(spec.patch, dtype=np.float64)
    if np.any(s <= 0) or np.any(d <= 0):
        raise InvalidArgumentError("spacing and region dims must be positive")

    raw = p * spec.alpha * t / d
    adjusted = np.where(s > t, np.maximum(t, raw), np.minimum(t, raw))
    lo, hi = bounds
    return tuple(float(x) for x in np.clip(adjusted, lo, hi))


def foreground_union(channels) -> np.ndarray:
    """Binary union of channels: 1 where the channel sum is positive.

    Accepts a MultiChannelMask, ProbabilityMap, or a raw (N, H, W, D)
    array; returns an (H, W, D) uint8 grid.
    """
    data = channels.data if isinstance(channels, (MultiChannelMask, ProbabilityMap)) else np.asarray(channels)
    if data.ndim != 4:
        raise InvalidArgumentError(f"expected (N, H, W, D), got {data.shape}")
    return (data.sum(axis=0) > 0).astype(np.uint8)
