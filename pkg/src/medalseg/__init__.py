"""Promptable multi-class volumetric medical image segmentation.

Text prompts resolve to class queries; a two-stage coarse-to-fine pipeline
decodes all classes in one pass around a pluggable backbone; spatial
prompts (model predictions or user scribbles) steer refinement.
"""

from .decoder import (
    ToyBackbone,
    ToyRefiner,
    decoder_forward,
    iterative_infer,
    toy_contracts,
)
from .errors import (
    DimensionMismatchError,
    EmptyCoarseError,
    InvalidArgumentError,
    MappingBuildError,
    MedalSegError,
    UnresolvedClassError,
    UnresolvedModalityError,
)
from .metrics import bce_dice_loss, dsc, evaluate_labelmaps, instance_f1_dsctp, nsd
from .pipeline import PipelineConfig, RunReport, RunResult, desk_config, run, sequential_baseline
from .postproc import PostprocParams, connected_components, refine_segmentation
from .promptgen import PromptGenParams, generate_spatial_prompts
from .textprompts import (
    ClassMapping,
    TextQuery,
    ToyTextEncoder,
    build_mappings,
    resolve_prompt,
    resolve_query,
)
from .volume import (
    LabelMap,
    MultiChannelMask,
    ProbabilityMap,
    ResampleSpec,
    Volume,
    dynamic_target_spacing,
    normalize_intensity,
    resample,
)

__version__ = "0.1.0"

__all__ = [
    "ClassMapping",
    "DimensionMismatchError",
    "EmptyCoarseError",
    "InvalidArgumentError",
    "LabelMap",
    "MappingBuildError",
    "MedalSegError",
    "MultiChannelMask",
    "PipelineConfig",
    "PostprocParams",
    "ProbabilityMap",
    "PromptGenParams",
    "ResampleSpec",
    "RunReport",
    "RunResult",
    "TextQuery",
    "ToyBackbone",
    "ToyRefiner",
    "ToyTextEncoder",
    "UnresolvedClassError",
    "UnresolvedModalityError",
    "Volume",
    "bce_dice_loss",
    "build_mappings",
    "connected_components",
    "decoder_forward",
    "desk_config",
    "dsc",
    "dynamic_target_spacing",
    "evaluate_labelmaps",
    "generate_spatial_prompts",
    "instance_f1_dsctp",
    "iterative_infer",
    "normalize_intensity",
    "nsd",
    "refine_segmentation",
    "resample",
    "resolve_prompt",
    "resolve_query",
    "run",
    "sequential_baseline",
    "toy_contracts",
]
