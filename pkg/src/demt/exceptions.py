"""Custom exceptions for the DeMT package."""


class DemtError(Exception):
    """Base exception class for the DeMT package."""

    pass


class ShapeError(DemtError):
    """Raised when tensor extents do not match an operation's contract."""

    pass


class NumericalError(DemtError):
    """Raised when a forward operation produces non-finite values."""

    pass


class GradientError(DemtError):
    """Raised when backward is called on something that cannot be differentiated."""

    pass


class ValidationError(DemtError):
    """Raised when input validation fails."""

    pass


class ConfigError(DemtError):
    """Raised when configuration operations fail."""

    pass


class DatasetError(DemtError):
    """Raised when dataset files cannot be written or read."""

    pass


class CorruptHeaderError(DatasetError):
    """Raised when a sample file does not start with a valid header."""

    pass


class TruncatedFileError(DatasetError):
    """Raised when a sample file ends before its declared payload."""

    pass


class ManifestMismatchError(DatasetError):
    """Raised when the manifest disagrees with the files on disk."""

    pass


class CheckpointError(DemtError):
    """Raised when checkpoint operations fail."""

    pass


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint was written by an unsupported format version."""

    pass


class OptimizerError(DemtError):
    """Raised when an optimizer step cannot be applied."""

    pass


class MetricError(DemtError):
    """Raised when a metric is undefined for its inputs."""

    pass


class UsageError(DemtError):
    """Raised when the command line is used incorrectly."""

    pass


class GradCheckFailure(DemtError):
    """Raised when the gradient-check suite finds a mismatch."""

    pass
