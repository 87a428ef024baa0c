"""Face-SSD: single-shot multi-task face detection and analysis."""
__version__ = "1.0.0"

from .errors import FaceSSDError
from .infer import detect
from .model import FaceSSDModel, build_model, load_model, save_weights
from .trainer import run_four_step_pipeline, train_phase

__all__ = [
    "FaceSSDError",
    "FaceSSDModel",
    "build_model",
    "detect",
    "load_model",
    "run_four_step_pipeline",
    "save_weights",
    "train_phase",
]
