"""Exception hierarchy shared across the package."""


class FlowLabError(Exception):
    """Base class for all package errors."""


class DimensionError(FlowLabError):
    """Vector/matrix shapes are incompatible."""


class RangeError(FlowLabError):
    """A scalar argument lies outside its documented domain."""


class LabelError(FlowLabError):
    """A condition label is not valid for the dataset/model at hand."""


class UnsupportedDatasetError(FlowLabError):
    """The operation requires a dataset kind it does not support."""


class ScheduleError(FlowLabError):
    """The time grid cannot accommodate the requested step."""


class CheckpointFormatError(FlowLabError):
    """Checkpoint bytes are malformed, truncated, or of an unknown version."""


class NumericError(FlowLabError):
    """A numeric invariant (finiteness) was violated.

    `step_index` identifies the sampler step at which the violation
    occurred, when applicable.
    """

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss; `last_finite_epoch` is -1 if none."""

    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


class ConfigError(FlowLabError):
    """A run configuration failed schema validation."""


class InputError(FlowLabError):
    """An input artifact (trajectory, CSV, report) is missing required data."""
