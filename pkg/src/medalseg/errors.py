"""Typed errors shared across the package."""


class MedalSegError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MedalSegError, ValueError):
    """An argument violates an operation precondition."""


class DimensionMismatchError(InvalidArgumentError):
    """Array shapes that must agree do not."""


class UnresolvedModalityError(MedalSegError, ValueError):
    """No modality keyword matched the prompt sentence."""


class UnresolvedClassError(MedalSegError, ValueError):
    """No class name or variant matched the prompt sentence."""


class MappingBuildError(MedalSegError, ValueError):
    """The prompt corpus produced an inconsistent class mapping."""


class EmptyCoarseError(MedalSegError, ValueError):
    """ROI extraction was asked to run on an empty coarse segmentation."""
