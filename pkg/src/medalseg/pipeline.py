"""Two-stage coarse-to-fine orchestration with sliding-window inference.

Stage 1 segments at coarse spacing with zero prompts to find the ROI;
stage 2 crops, resamples under the memory budget, and refines with the
coarse probabilities as soft spatial prompts (optionally merged with user
scribbles). Patches blend under a separable Gaussian window with 50%
overlap. The sequential execution mode runs one class per decoder
invocation (benchmark baseline); volume-level processing is shared so the
two modes see identical grids, masks and patch RNG streams.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .decoder import iterative_infer, toy_contracts
from .errors import EmptyCoarseError, InvalidArgumentError
from .postproc import PostprocParams, argmax_labelmap, refine_segmentation
from .promptgen import PromptGenParams
from .textprompts import TextQuery, ToyTextEncoder, build_mappings, load_corpus, resolve_query
from .volume import (
    DEFAULT_SPACING_BOUNDS,
    LabelMap,
    MultiChannelMask,
    ProbabilityMap,
    RAW,
    ResampleSpec,
    Volume,
    dynamic_target_spacing,
    normalize_intensity,
    resample,
    resample_grid,
    resampled_dims,
)


@dataclass(frozen=True)
class StageConfig:
    spacing: tuple[float, float, float]
    crop: tuple[int, int, int]

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing) or any(c < 1 for c in self.crop):
            raise InvalidArgumentError("stage spacing must be positive and crop >= 1")


@dataclass
class PipelineConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig((1.5, 1.5, 3.0), (224, 224, 128)))
    stage2: StageConfig = field(default_factory=lambda: StageConfig((1.0, 1.0, 1.0), (192, 192, 192)))
    roi_scale: float = 1.25
    budget_factor: float = 1.8
    budget_slack: float = 1.9
    alpha: float = 1.0
    spacing_bounds: tuple[float, float] = DEFAULT_SPACING_BOUNDS
    class_spacing_bounds: dict = field(default_factory=dict)  # class name -> [lo, hi]
    t_iter: int = 2
    rounds: int = 1
    blocks: tuple[int, ...] = (4, 8)
    prompt_params: PromptGenParams = field(default_factory=PromptGenParams)
    postproc: PostprocParams = field(default_factory=PostprocParams)
    mode: str = "text-only"
    execution: str = "parallel"
    seed: int = 0

    def __post_init__(self):
        if not 1.1 <= self.roi_scale <= 1.5:
            raise InvalidArgumentError(f"roi_scale {self.roi_scale} outside [1.1, 1.5]")
        if self.mode not in ("text-only", "hybrid"):
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")
        if self.execution not in ("parallel", "sequential"):
            raise InvalidArgumentError(f"unknown execution {self.execution!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        for key in ("stage1", "stage2"):
            if key in d and not isinstance(d[key], StageConfig):
                d[key] = StageConfig(tuple(d[key]["spacing"]), tuple(d[key]["crop"]))
        if "prompt_params" in d and not isinstance(d["prompt_params"], PromptGenParams):
            pp = dict(d["prompt_params"])
            for k in ("p_drop_range", "p_add_range"):
                if k in pp:
                    pp[k] = tuple(pp[k])
            if "block_sizes" in pp:
                pp["block_sizes"] = tuple(tuple(b) for b in pp["block_sizes"])
            d["prompt_params"] = PromptGenParams(**pp)
        if "postproc" in d and not isinstance(d["postproc"], PostprocParams):
            d["postproc"] = PostprocParams(**d["postproc"])
        for k in ("spacing_bounds", "blocks"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        text = open(path, "rb").read()
        if str(path).endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib

            return cls.from_dict(tomllib.loads(text.decode()))
        return cls.from_dict(json.loads(text.decode()))


def desk_config(**overrides) -> PipelineConfig:
    """Small-scale configuration used by the bundled phantom and benchmarks."""
    base = dict(
        stage1=StageConfig((2.0, 2.0, 2.0), (32, 32, 32)),
        stage2=StageConfig((1.0, 1.0, 1.0), (32, 32, 32)),
    )
    base.update(overrides)
    return PipelineConfig(**base)


@dataclass(frozen=True)
class RoiBox:
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]  # exclusive

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise InvalidArgumentError(f"empty roi {self.lo}..{self.hi}")

    @property
    def slices(self):
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    @property
    def dims(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))


class MemoryMeter:
    """Analytic working-set tracker; records the peak of observed sums."""

    def __init__(self):
        self.base = 0
        self.peak = 0

    def set_base(self, *arrays):
        self.base = sum(int(a.nbytes) for a in arrays)
        self.peak = max(self.peak, self.base)

    def observe(self, extra_bytes: int):
        self.peak = max(self.peak, self.base + int(extra_bytes))


@dataclass
class RunReport:
    n_classes: int = 0
    execution: str = "parallel"
    mode: str = "text-only"
    fallback: bool = False
    phases: dict = field(default_factory=dict)    # name -> wall ms
    forwards: dict = field(default_factory=dict)  # phase -> {backbone, adapt, refiner}
    peak_bytes: int = 0
    prompt_errors: list = field(default_factory=list)

    @property
    def backbone_forwards(self) -> int:
        return sum(v.get("backbone", 0) for v in self.forwards.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_forwards"] = self.backbone_forwards
        return d


@dataclass
class RunResult:
    labels: LabelMap
    probabilities: ProbabilityMap
    report: RunReport
    queries: list


def gaussian_window(crop) -> np.ndarray:
    """Separable Gaussian blend weights, sigma = crop/8 per axis, peak 1."""
    axes = []
    for n in crop:
        sigma = n / 8.0
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        axes.append(np.exp(-0.5 * (x / sigma) ** 2))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def tile_starts(dim: int, crop: int) -> list[int]:
    """Tile origins with 50% overlap; the last tile is flush with the end."""
    if dim <= crop:
        return [0]
    step = max(1, crop // 2)
    starts = list(range(0, dim - crop + 1, step))
    if starts[-1] != dim - crop:
        starts.append(dim - crop)
    return starts


def sliding_window_infer(data: np.ndarray, z: np.ndarray, s_p: np.ndarray, crop,
                         backbone, refiner, cfg: PipelineConfig, stage_idx: int,
                         meter: MemoryMeter | None = None, execution: str | None = None,
                         channel_meta=None) -> ProbabilityMap:
    """Tile the volume, decode each patch, Gaussian-blend the overlaps.

    In sequential execution each class runs through its own full pass with
    a single-row query matrix; per-patch RNG streams depend only on
    (seed, stage, tile), so block masks are identical across modes.
    """
    n = z.shape[0]
    if n == 0:
        raise InvalidArgumentError("at least one query required")
    execution = execution or cfg.execution
    if execution == "sequential" and n > 1:
        parts = [
            sliding_window_infer(data, z[i : i + 1], s_p[i : i + 1], crop, backbone, refiner,
                                 cfg, stage_idx, meter, execution="parallel").data
            for i in range(n)
        ]
        return ProbabilityMap(data=np.concatenate(parts), channel_meta=channel_meta or list(range(n)))

    dims = data.shape
    pad = [max(0, c - d) for c, d in zip(crop, dims)]
    if any(pad):
        data = np.pad(data, [(0, p) for p in pad])
        s_p = np.pad(s_p, [(0, 0)] + [(0, p) for p in pad])
    pdims = data.shape

    w = gaussian_window(crop)
    accum = np.zeros((n,) + pdims)
    wsum = np.zeros(pdims)
    starts = [tile_starts(d, c) for d, c in zip(pdims, crop)]
    tile_idx = 0
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                region = (slice(i, i + crop[0]), slice(j, j + crop[1]), slice(k, k + crop[2]))
                patch = data[region]
                sp_patch = s_p[(slice(None),) + region]
                s_f = (sp_patch.sum(axis=0) > 0).astype(np.uint8)
                f, v = backbone.features(patch, s_f)
                t = backbone.adapt_queries(v, z)
                rng = np.random.default_rng((cfg.seed, stage_idx, tile_idx))
                p = iterative_infer(f, t, sp_patch, refiner, rng,
                                    t_iter=cfg.t_iter, rounds=cfg.rounds, blocks=cfg.blocks)
                accum[(slice(None),) + region] += p * w
                wsum[region] += w
                if meter is not None:
                    meter.observe(accum.nbytes + wsum.nbytes + f.f.nbytes * 3 + p.nbytes)
                tile_idx += 1

    out = accum / wsum
    out = out[(slice(None),) + tuple(slice(0, d) for d in dims)]
    return ProbabilityMap(data=np.clip(out, 0.0, 1.0), channel_meta=channel_meta or list(range(n)))


def _stage_spacing(volume: Volume, region_dims_mm, stage: StageConfig, cfg: PipelineConfig) -> tuple:
    """Dynamic target spacing with the region measured on the target grid."""
    spec = ResampleSpec(stage.spacing, stage.crop, alpha=cfg.alpha)
    d_ref = [max(e / t, 1e-9) for e, t in zip(region_dims_mm, stage.spacing)]
    return dynamic_target_spacing(volume.spacing, d_ref, spec, bounds=cfg.spacing_bounds)


def stage1_coarse(volume: Volume, z: np.ndarray, cfg: PipelineConfig, backbone, refiner,
                  meter: MemoryMeter | None = None, execution: str | None = None):
    """Coarse pass at stage-1 spacing with zero prompts.

    Returns (probabilities, labels, grid spacing); empty labels signal the
    full-volume fallback to the caller.
    """
    extent_mm = [d * s for d, s in zip(volume.dims, volume.spacing)]
    s1 = _stage_spacing(volume, extent_mm, cfg.stage1, cfg)
    vol1 = resample(volume, s1)
    n = z.shape[0]
    zero_prompts = np.zeros((n,) + vol1.dims)
    prob = sliding_window_infer(vol1.data, z, zero_prompts, cfg.stage1.crop, backbone, refiner,
                                cfg, stage_idx=1, meter=meter, execution=execution)
    labels = argmax_labelmap(prob, cfg.postproc.prob_threshold)
    return prob, labels, s1


def extract_roi(coarse: LabelMap, scale: float, dims=None) -> RoiBox:
    """Bounding box of nonzero labels, scaled about its center.

    Lower bounds floor, upper bounds ceil (context-inclusive), clamped.
    """
    nz = np.argwhere(coarse.data[0] > 0)
    if len(nz) == 0:
        raise EmptyCoarseError("no foreground in coarse segmentation")
    dims = dims or coarse.data.shape[1:]
    lo, hi = [], []
    for ax in range(3):
        a, b = int(nz[:, ax].min()), int(nz[:, ax].max()) + 1
        center = (a + b) / 2.0
        half = (b - a) * scale / 2.0
        lo.append(max(0, int(np.floor(center - half))))
        hi.append(min(int(dims[ax]), int(np.ceil(center + half))))
    return RoiBox(lo=tuple(lo), hi=tuple(hi))


def roi_to_native(box: RoiBox, grid_spacing, native_spacing, native_dims) -> RoiBox:
    """Map an ROI between grids through physical coordinates."""
    lo, hi = [], []
    for ax in range(3):
        lo_mm = box.lo[ax] * grid_spacing[ax]
        hi_mm = box.hi[ax] * grid_spacing[ax]
        lo.append(max(0, int(np.floor(lo_mm / native_spacing[ax]))))
        hi.append(min(int(native_dims[ax]), int(np.ceil(hi_mm / native_spacing[ax]))))
    lo = [min(l, int(native_dims[ax]) - 1) for ax, l in enumerate(lo)]
    hi = [max(h, lo[ax] + 1) for ax, h in enumerate(hi)]
    return RoiBox(lo=tuple(lo), hi=tuple(hi))


def enforce_memory_budget(extent_mm, crop, target, factor: float = 1.8, slack: float = 1.9) -> tuple:
    """Coarsen the target spacing when the ROI physical volume is too big.

    Within budget (prod extent <= factor^3 * prod crop * prod target) the
    target is untouched; otherwise per axis t' = max(t, extent/(slack*crop))
    so the resampled dims stay within slack * crop.
    """
    extent_mm = [float(e) for e in extent_mm]
    v = float(np.prod(extent_mm))
    v_threshold = factor ** 3 * float(np.prod(crop)) * float(np.prod(target))
    if v <= v_threshold:
        return tuple(float(t) for t in target)
    return tuple(max(float(t), e / (slack * c)) for t, e, c in zip(target, extent_mm, crop))


def _resample_channels_to(data: np.ndarray, out_dims, order: int) -> np.ndarray:
    return np.stack([resample_grid(np.asarray(c, dtype=np.float64), out_dims, order) for c in data])


def _smallest_class_extent(labels: LabelMap, spacing) -> list | None:
    """Physical bbox extents (mm) of the class with the smallest bbox volume."""
    seg = labels.data[0]
    best = None
    for cid in np.unique(seg):
        if cid == 0:
            continue
        nz = np.argwhere(seg == cid)
        ext = [(int(nz[:, ax].max()) + 1 - int(nz[:, ax].min())) * spacing[ax] for ax in range(3)]
        vol = float(np.prod(ext))
        if best is None or vol < best[0]:
            best = (vol, ext)
    return best[1] if best else None


def stage2_fine(volume: Volume, z: np.ndarray, coarse_prob: ProbabilityMap | None,
                coarse_labels: LabelMap | None, coarse_spacing, roi: RoiBox,
                cfg: PipelineConfig, backbone, refiner, meter: MemoryMeter | None = None,
                scribbles: MultiChannelMask | None = None, erase: MultiChannelMask | None = None,
                execution: str | None = None, channel_meta=None) -> ProbabilityMap:
    """High-resolution refinement inside the ROI; output on the native grid."""
    n = z.shape[0]
    native_dims = volume.dims
    sub = volume.data[roi.slices]
    extent_mm = [d * s for d, s in zip(roi.dims, volume.spacing)]

    ref_mm = None
    if coarse_labels is not None:
        ref_mm = _smallest_class_extent(coarse_labels, coarse_spacing)
    if ref_mm is None:
        ref_mm = extent_mm
    spec2 = ResampleSpec(cfg.stage2.spacing, cfg.stage2.crop, alpha=cfg.alpha)
    d_ref = [max(e / t, 1e-9) for e, t in zip(ref_mm, cfg.stage2.spacing)]
    t_dyn = dynamic_target_spacing(volume.spacing, d_ref, spec2, bounds=cfg.spacing_bounds)
    t2 = enforce_memory_budget(extent_mm, cfg.stage2.crop, t_dyn, cfg.budget_factor, cfg.budget_slack)

    grid_dims = resampled_dims(roi.dims, volume.spacing, t2)
    sub_grid = resample_grid(np.asarray(sub, dtype=np.float64), grid_dims, order=1)

    if coarse_prob is not None:
        native_prob = _resample_channels_to(coarse_prob.data, native_dims, order=1)
        cropped = native_prob[(slice(None),) + roi.slices]
        s_p = _resample_channels_to(cropped, grid_dims, order=1)
        s_p = np.clip(s_p, 0.0, 1.0)
    else:
        s_p = np.zeros((n,) + tuple(grid_dims))

    if scribbles is not None:
        scr = _resample_channels_to(scribbles.data[(slice(None),) + roi.slices], grid_dims, order=0)
        s_p = np.maximum(s_p, scr)
    if erase is not None:
        er = _resample_channels_to(erase.data[(slice(None),) + roi.slices], grid_dims, order=0)
        s_p = s_p * (1.0 - er)

    prob = sliding_window_infer(sub_grid, z, s_p, cfg.stage2.crop, backbone, refiner, cfg,
                                stage_idx=2, meter=meter, execution=execution,
                                channel_meta=channel_meta)

    out = np.zeros((n,) + tuple(native_dims))
    back = _resample_channels_to(prob.data, roi.dims, order=1)
    out[(slice(None),) + roi.slices] = back
    return ProbabilityMap(data=np.clip(out, 0.0, 1.0), channel_meta=channel_meta or list(range(n)))


def resolve_prompts(prompts, mapping=None, variants=None):
    """Resolve raw prompt dicts/queries; returns (queries, per-prompt errors)."""
    if mapping is None or variants is None:
        mapping, variants = build_mappings(load_corpus())
    queries, errors = [], []
    for item in prompts:
        if isinstance(item, TextQuery):
            queries.append(item)
            continue
        sentence = item["sentence"]
        l = int(item.get("instance_label", 0))
        try:
            queries.append(resolve_query(sentence, l, mapping, variants))
        except Exception as e:  # typed errors surfaced per prompt
            errors.append({"sentence": sentence, "error": type(e).__name__, "detail": str(e)})
    return queries, errors


def _snapshot(backbone, refiner) -> dict:
    return {"backbone": backbone.feature_calls, "adapt": backbone.adapt_calls, "refiner": refiner.calls}


def _delta(after: dict, before: dict) -> dict:
    return {k: after[k] - before[k] for k in after}


def run(volume: Volume, prompts, cfg: PipelineConfig | None = None,
        scribbles: MultiChannelMask | None = None, erase: MultiChannelMask | None = None,
        encoder=None, contracts=None, execution: str | None = None, stage: str = "two-stage",
        base_prob: ProbabilityMap | None = None) -> RunResult:
    """Full text-only or hybrid run.

    `prompts` is a list of {"sentence", "instance_label"} dicts or resolved
    TextQuery objects. Scribbles (hybrid mode) are native-resolution binary
    channels aligned with the prompt order. `base_prob` replaces the
    stage-1 coarse probabilities as the stage-2 prompt source (used by
    interactive refinement so repeated refines are reproducible).
    """
    cfg = cfg or desk_config()
    execution = execution or cfg.execution
    queries, errors = resolve_prompts(prompts)
    if not queries:
        raise InvalidArgumentError(f"no prompt resolved; errors: {errors}")

    if volume.intensity_domain == RAW:
        volume = normalize_intensity(volume)

    encoder = encoder or ToyTextEncoder(seed=cfg.seed)
    z = encoder.encode(queries)
    backbone, refiner = contracts if contracts else toy_contracts(seed=cfg.seed)
    meter = MemoryMeter()
    meter.set_base(volume.data)
    channel_meta = [q.class_id for q in queries]

    report = RunReport(n_classes=len(queries), execution=execution, mode=cfg.mode,
                       prompt_errors=errors)

    t0 = time.perf_counter()
    before = _snapshot(backbone, refiner)
    if base_prob is None:
        prob1, lab1, s1 = stage1_coarse(volume, z, cfg, backbone, refiner, meter, execution)
        report.phases["stage1_ms"] = (time.perf_counter() - t0) * 1000.0
        report.forwards["stage1"] = _delta(_snapshot(backbone, refiner), before)
        fallback = not bool(np.any(lab1.data))
    else:
        # refinement entry: the caller supplies native-grid prompt probabilities
        prob1, s1 = base_prob, volume.spacing
        lab1 = argmax_labelmap(base_prob, cfg.postproc.prob_threshold)
        fallback = not bool(np.any(lab1.data))

    if stage == "coarse":
        native = _resample_channels_to(prob1.data, volume.dims, order=1)
        prob_native = ProbabilityMap(data=np.clip(native, 0.0, 1.0), channel_meta=channel_meta)
        labels = refine_segmentation(prob_native, cfg.postproc)
        report.fallback = fallback
        report.peak_bytes = meter.peak
        report.phases["total_ms"] = (time.perf_counter() - t0) * 1000.0
        return RunResult(labels=labels, probabilities=prob_native, report=report, queries=queries)

    t1 = time.perf_counter()
    before = _snapshot(backbone, refiner)
    if fallback:
        roi = RoiBox(lo=(0, 0, 0), hi=tuple(volume.dims))
        prob = stage2_fine(volume, z, None, None, s1, roi, cfg, backbone, refiner, meter,
                           scribbles=scribbles, erase=erase, execution=execution,
                           channel_meta=channel_meta)
    else:
        box = extract_roi(lab1, cfg.roi_scale)
        roi = roi_to_native(box, s1, volume.spacing, volume.dims)
        prob = stage2_fine(volume, z, prob1, lab1, s1, roi, cfg, backbone, refiner, meter,
                           scribbles=scribbles, erase=erase, execution=execution,
                           channel_meta=channel_meta)
    report.phases["stage2_ms"] = (time.perf_counter() - t1) * 1000.0
    report.forwards["stage2"] = _delta(_snapshot(backbone, refiner), before)
    report.fallback = fallback

    labels = refine_segmentation(prob, cfg.postproc)
    report.peak_bytes = meter.peak
    report.phases["total_ms"] = (time.perf_counter() - t0) * 1000.0
    return RunResult(labels=labels, probabilities=prob, report=report, queries=queries)


def sequential_baseline(volume: Volume, prompts, cfg: PipelineConfig | None = None, **kw) -> RunResult:
    """Benchmark baseline: identical pipeline, one class per decoder call."""
    return run(volume, prompts, cfg, execution="sequential", **kw)
