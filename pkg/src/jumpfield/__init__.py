"""jumpfield: mesh-based 2D neural fields with learned discontinuities."""

from .field import FieldModel, load_model, render_field, save_model
from .geometry import Mesh2D
from .imgio import TargetImage, load_image, save_image
from .pipeline import PipelineConfig, fit_pipeline

__all__ = [
    "FieldModel",
    "Mesh2D",
    "PipelineConfig",
    "TargetImage",
    "fit_pipeline",
    "load_image",
    "load_model",
    "render_field",
    "save_image",
    "save_model",
]

__version__ = "0.1.0"
