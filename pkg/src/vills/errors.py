"""Exception hierarchy shared across the package."""


class VillsError(Exception):
    """Base class for all package errors."""


class ShapeError(VillsError):
    """Tensor extents incompatible with the requested operation."""


class ParameterError(VillsError):
    """A scalar argument is outside its valid range."""


class UsageError(VillsError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class ConfigError(VillsError):
    """Configuration rejected: unknown key or precondition violation."""


class ExtractionError(VillsError):
    """Keypoint or segmentation failure; carries the offending image id."""

    def __init__(self, message, image_id=None):
        super().__init__(message)
        self.image_id = image_id


class EmptyPromptError(VillsError):
    """All-zero indicator vector: nothing to prompt the segmenter with."""


class ProtocolError(VillsError):
    """Retrieval protocol cannot be satisfied by the given data."""


class SamplingError(VillsError):
    """A batch does not satisfy the sampling requirements of a loss."""


class DataError(VillsError):
    """Labels or records are inconsistent with the model."""


class CorruptionError(VillsError):
    """A container or parameter set is structurally damaged."""


class EvaluationError(VillsError):
    """A function produced a non-finite value where a finite one was required."""


class TrainingAbort(VillsError):
    """Training stopped on a non-finite loss; carries the last step report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
