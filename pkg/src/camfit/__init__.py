"""Multi-person, camera-space body fitting against simulated expert cues."""

from .body_model import (
    BodyConfig,
    BodyModel,
    Mesh,
    PersonState,
    SceneParams,
    build_default_model,
    regress_joints,
    regress_keypoints,
    synthesize,
)
from .camera import Intrinsics, default_camera, project
from .errors import (
    CamfitError,
    ConfigurationError,
    EvaluationError,
    PlacementError,
    ProjectionError,
    SchemaError,
)
from .fit_engine import FitConfig, SceneResult, StageConfig, default_config, fit_scene
from .losses import LossWeights, Observed2D, DepthCue, geman_mcclure, total_loss
from .semantic_shape import AttributeCatalog, ShapeEstimate, default_catalog

__version__ = "0.1.0"

__all__ = [
    "AttributeCatalog",
    "BodyConfig",
    "BodyModel",
    "CamfitError",
    "ConfigurationError",
    "DepthCue",
    "EvaluationError",
    "FitConfig",
    "Intrinsics",
    "LossWeights",
    "Mesh",
    "Observed2D",
    "PersonState",
    "PlacementError",
    "ProjectionError",
    "SceneParams",
    "SceneResult",
    "SchemaError",
    "ShapeEstimate",
    "StageConfig",
    "build_default_model",
    "default_camera",
    "default_catalog",
    "default_config",
    "fit_scene",
    "geman_mcclure",
    "project",
    "regress_joints",
    "regress_keypoints",
    "synthesize",
    "total_loss",
    "__version__",
]
