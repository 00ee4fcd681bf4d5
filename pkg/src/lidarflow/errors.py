"""Exception types raised across the pipeline."""


class LidarFlowError(Exception):
    """Base class for all library errors."""


class EmptyIndex(LidarFlowError):
    """A spatial query was issued against an index with no points."""


class EmptyGrid(LidarFlowError):
    """A voxel-distance query was issued against an empty voxel grid."""


class DegenerateCorrespondences(LidarFlowError):
    """Too few or rank-deficient correspondences for a rigid fit."""


class DegenerateNeighborhood(LidarFlowError):
    """A point neighborhood has zero spatial extent."""


class InsufficientSamples(LidarFlowError):
    """Not enough samples to fit a transform bank."""


class NoCorrespondences(LidarFlowError):
    """Feature matching produced no surviving pairs."""


class SingleClassData(LidarFlowError):
    """Classifier training data contains only one class."""


class TooFewPoints(LidarFlowError):
    """An object has too few member points for motion estimation."""


class LengthMismatch(LidarFlowError):
    """Estimated and ground-truth flow fields differ in length."""


class MalformedFile(LidarFlowError):
    """A scan or model file violates its format.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedRecord(MalformedFile):
    """A binary file ended mid-record."""


class StageError(LidarFlowError):
    """A pipeline stage failed; wraps the underlying error with a stage tag."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
