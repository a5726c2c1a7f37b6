"""Multiple instance learning with max, mean, attention and distribution pooling."""

__version__ = "0.1.0"

from .errors import (DimensionError, DomainError, InputError, LoadError, MilError, NumericError, ParameterError,
                     SpecError, TrainingError)
from .model import LayerSpec, Model, ModelSpec, TaskKind, build_model, forward_bag, forward_batch, load_model, save_model
from .pooling import PoolingSpec, apply_pooling
from .rng import RngStream
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, cross_validate, evaluate, train_model

__all__ = [
    "DimensionError", "DomainError", "InputError", "LoadError", "MilError", "NumericError", "ParameterError",
    "SpecError", "TrainingError", "LayerSpec", "Model", "ModelSpec", "TaskKind", "build_model", "forward_bag",
    "forward_batch", "load_model", "save_model", "PoolingSpec", "apply_pooling", "RngStream", "Tensor",
    "backward", "no_grad", "TrainConfig", "cross_validate", "evaluate", "train_model",
]
