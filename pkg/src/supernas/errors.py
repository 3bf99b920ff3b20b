"""Exception types raised across the package.

Every error carries a human-readable message; callers that need to react
programmatically catch the specific class.
"""


class SupernasError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SupernasError):
    """Tensor shapes are inconsistent with the requested operation."""


class GroupsError(SupernasError):
    """Group count does not divide the channel counts of a convolution."""


class ConfigError(SupernasError):
    """A configuration value is missing, malformed, or out of range."""


class LabelError(SupernasError):
    """A class label lies outside [0, num_classes)."""


class TapeError(SupernasError):
    """The loss passed to backward was not produced by the given tape."""


class SpecError(SupernasError):
    """A supernet or choice-block specification violates its invariants."""


class ArchitectureError(SupernasError):
    """An architecture's genes do not fit the search space."""


class SliceError(SupernasError):
    """A channel slice request exceeds the allocated storage."""


class CodecError(SupernasError):
    """Architecture text could not be parsed; reports the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class LatencyTableError(SupernasError):
    """A latency table is missing an entry for a block gene."""


class SamplerInfeasibleError(SupernasError):
    """Constraint-binned sampling exhausted its rejection budget."""

    def __init__(self, message: str, empty_bins: list[int]):
        super().__init__(message)
        self.empty_bins = empty_bins


class ConstraintInfeasibleError(SupernasError):
    """No constraint-satisfying architecture was found within the retry budget."""


class ArchiveDegenerateError(SupernasError):
    """Crossover/mutation could not produce enough valid children."""


class DatasetFormatError(SupernasError):
    """A dataset file is truncated or contains invalid records."""


class CheckpointError(SupernasError):
    """A checkpoint file is malformed or does not match the model."""
