"""
Custom exceptions for the liftmesh package.
"""

from typing import Optional


class LiftMeshError(Exception):
    """Base exception for liftmesh errors."""

    pass


class ContractViolation(LiftMeshError):
    """Exception raised when an operation receives inputs outside its contract."""

    pass


class TopologyError(LiftMeshError):
    """Exception raised when a skeleton topology is not a valid tree."""

    pass


class TopologyNotFoundError(LiftMeshError):
    """Exception raised when a named topology is not registered."""

    pass


class ConfigError(LiftMeshError):
    """Exception raised when a configuration value is invalid."""

    pass


class AlignmentError(LiftMeshError):
    """Exception raised when Procrustes alignment is degenerate."""

    pass


class FormatError(LiftMeshError):
    """Exception raised when a checkpoint container is malformed."""

    def __init__(self, message: str, entry: Optional[str] = None):
        if entry is not None:
            message = f"{message} (entry '{entry}')"
        super().__init__(message)
        self.entry = entry


class IngestionError(LiftMeshError):
    """Exception raised when a pose or keypoint file cannot be parsed."""

    def __init__(self, message: str, record_id: Optional[object] = None):
        if record_id is not None:
            message = f"{message} (record {record_id})"
        super().__init__(message)
        self.record_id = record_id


class CheckpointIOError(LiftMeshError):
    """Exception raised when a file cannot be read or written."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{message}: {path}")
        self.path = path


class NumericalError(LiftMeshError):
    """Exception raised when training produces a non-finite loss."""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
        self.step = step
