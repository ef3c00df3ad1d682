"""Training, data, evaluation and command-line workflows."""
from .config import TrainingConfig
from .data import DatasetManifest, ManifestItem, ShapeWorldSpec, generate_shapeworld, render_shapeworld
from .evaluation import GUIDANCE_WEIGHTS, PrototypeAligner, evaluate, sweep_guidance
from .training import load_estimator, train, train_autoencoder, train_controlnet, train_diffusion, train_transformer

__all__ = [
    "DatasetManifest",
    "GUIDANCE_WEIGHTS",
    "ManifestItem",
    "PrototypeAligner",
    "ShapeWorldSpec",
    "TrainingConfig",
    "evaluate",
    "generate_shapeworld",
    "load_estimator",
    "render_shapeworld",
    "sweep_guidance",
    "train",
    "train_autoencoder",
    "train_controlnet",
    "train_diffusion",
    "train_transformer",
]
