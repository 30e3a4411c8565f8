"""
Error types for the shape-prior tracker.

Every error carries the module it was raised from so the CLI and the HTTP service
can emit a machine-readable record.
"""
from typing import Any, Dict, Optional


class ShapeTrackerError(Exception):
    """Base class for all tracker errors."""

    module = "core"

    def __init__(self, message: str = "", module: Optional[str] = None):
        super().__init__(message or self.__class__.__name__)
        if module is not None:
            self.module = module

    def to_record(self) -> Dict[str, Any]:
        return {
            "success": False,
            "module": self.module,
            "error_type": self.__class__.__name__,
            "error": str(self),
        }


# core_geometry
class BehindCamera(ShapeTrackerError):
    module = "core_geometry"


class OutOfBounds(ShapeTrackerError):
    module = "core_geometry"


class Miss(ShapeTrackerError):
    module = "core_geometry"


class DegenerateParallax(ShapeTrackerError):
    module = "core_geometry"

    def __init__(self, message: str = "", parallax_deg: float = 0.0):
        super().__init__(message)
        self.parallax_deg = parallax_deg


# prior_shape
class MeshParseError(ShapeTrackerError):
    module = "prior_shape"

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyMesh(ShapeTrackerError):
    module = "prior_shape"


# registration
class TooFewPoints(ShapeTrackerError):
    module = "registration"


class DegenerateConfiguration(ShapeTrackerError):
    module = "registration"


# optimizer
class TooFewObservations(ShapeTrackerError):
    module = "optimizer"


class Diverged(ShapeTrackerError):
    module = "optimizer"

    def __init__(self, message: str = "", pose: Any = None):
        super().__init__(message)
        self.pose = pose


class SingularSystem(ShapeTrackerError):
    module = "optimizer"


# pipeline
class InsufficientDepthPoints(ShapeTrackerError):
    module = "pipeline"


class NotInitialized(ShapeTrackerError):
    module = "pipeline"


class PreconditionError(ShapeTrackerError):
    module = "pipeline"


# eval_cli
class MarkerNotVisible(ShapeTrackerError):
    module = "eval_cli"


class EmptyOverlap(ShapeTrackerError):
    module = "eval_cli"


class ConfigError(ShapeTrackerError):
    module = "eval_cli"


class InputFormatError(ShapeTrackerError):
    module = "eval_cli"
