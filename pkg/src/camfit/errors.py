"""Exception types shared across the package."""


class CamfitError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CamfitError):
    """Inconsistent dimensions or invalid configuration values."""


class ProjectionError(CamfitError):
    """A point reached the camera's near plane (z <= z_min)."""

    def __init__(self, message: str, point_index: int | None = None):
        super().__init__(message)
        self.point_index = point_index


class EvaluationError(CamfitError):
    """Objective or gradient evaluation produced a non-finite value."""


class PlacementError(CamfitError):
    """Scene generation could not place a person after max retries."""


class SchemaError(CamfitError):
    """A JSON document violated the expected schema.

    ``path`` is a ``$.dotted.path`` into the offending document.
    """

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{message} (at {path})")
        self.path = path
