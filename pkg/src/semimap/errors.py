"""Exception types shared across the package."""


class SemimapError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SemimapError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class FormatError(SemimapError):
    """Malformed on-disk data (scan/label/pose/snapshot files)."""


class TrainingError(SemimapError):
    """Training aborted (non-finite loss or gradient)."""

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


class AlignmentError(SemimapError):
    """ICP/merge failure (CLI exit code 4)."""


class MetricError(SemimapError):
    """Evaluation requested on empty or unusable inputs."""


class EmptyMapError(SemimapError):
    """Operation requires a non-empty feature grid."""
