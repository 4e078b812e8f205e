"""glyphnet: a small numpy CNN engine for handwritten character recognition.

The package builds three convolutional classifiers (inception/residual,
residual-only and densely connected), trains them with Adam under a step
learning-rate decay, and averages their softmax outputs into an ensemble.
"""

from __future__ import annotations

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, DatasetSplit, LabeledImage, load_dataset
from .errors import GlyphNetError
from .models import (
    EnsembleSpec,
    InputSpec,
    ModelGraph,
    build_model,
    ensemble_predict,
)
from .tensor import GradTape, Tensor, precision
from .training import TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "DatasetSplit",
    "EnsembleSpec",
    "GlyphNetError",
    "GradTape",
    "InputSpec",
    "LabeledImage",
    "ModelGraph",
    "Tensor",
    "TrainConfig",
    "build_model",
    "ensemble_predict",
    "evaluate",
    "fit",
    "load_checkpoint",
    "load_dataset",
    "precision",
    "save_checkpoint",
]
