"""
Exception hierarchy for VIHE.

Every error raised by the package on invalid input or a violated invariant
derives from VIHEError; the CLI maps it to exit code 3.
"""


class VIHEError(Exception):
    """Base class for all VIHE errors."""
    pass


class GeometryError(VIHEError):
    """Exception raised for invalid poses, cameras or rigs."""
    pass


class RigDivergenceError(GeometryError):
    """
    Raised when an action pose leaves the inflated workspace.

    completed_actions holds the actions of the stages decoded before the divergence.
    """

    def __init__(self, message: str, completed_actions=None):
        super().__init__(message)
        self.completed_actions = list(completed_actions or [])


class RenderError(VIHEError):
    """Exception raised for rasterization and image ingestion errors."""
    pass


class DiffCoreError(VIHEError):
    """Exception raised by the tensor core."""
    pass


class ShapeError(DiffCoreError):
    """Raised on incompatible tensor shapes."""
    pass


class NonFiniteGradientError(DiffCoreError):
    """Raised when an optimizer step sees a NaN or infinite gradient."""
    pass


class CheckpointError(DiffCoreError):
    """Raised for unreadable or incompatible checkpoint containers."""
    pass


class ModelError(VIHEError):
    """Exception raised for invalid model configuration or inputs."""
    pass


class ConfigMismatchError(ModelError):
    """Raised when a checkpoint's configuration differs from the requested one."""
    pass


class DatasetError(VIHEError):
    """Exception raised for malformed demonstrations on disk or in memory."""
    pass


class TargetError(VIHEError):
    """Raised when supervision targets cannot be built (target outside frustum)."""
    pass


class TrainingError(VIHEError):
    """Raised when a training step produces a non-finite loss."""
    pass


class TaskError(VIHEError):
    """Raised when a synthetic scene cannot satisfy its constraints."""
    pass


class ReportError(VIHEError):
    """Raised when an evaluation report does not match its schema."""
    pass
