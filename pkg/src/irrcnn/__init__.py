"""A self-contained deep-learning toolkit for histopathology image
classification: a reverse-mode autodiff tensor engine, an
inception-recurrent-residual convolutional network, a deterministic data
pipeline, an SGD trainer with checkpointing, and patient/image-level
evaluation metrics. Built on numpy; images move through Pillow.
"""

from .checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from .data import AugmentConfig, Manifest, SampleRecord, ingest, split_by_patient
from .errors import ConfigError, DataError, IrrcnnError, NumericError, ShapeError
from .evaluation import EvalReport, PredictionRecord, evaluate, roc_auc, wta_aggregate
from .model import IRRU, RCL, IRRUSpec, ModelConfig, RCLSpec, Transition, build_model, model_forward
from .rng import fork_rng
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, TrainData, cross_entropy, lr_schedule, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "IrrcnnError",
    "NumericError",
    "ShapeError",
    "IRRU",
    "RCL",
    "IRRUSpec",
    "ModelConfig",
    "RCLSpec",
    "Transition",
    "build_model",
    "model_forward",
    "fork_rng",
    "Tensor",
    "no_grad",
    "AugmentConfig",
    "Manifest",
    "SampleRecord",
    "ingest",
    "split_by_patient",
    "Checkpoint",
    "load_checkpoint",
    "restore_model",
    "save_checkpoint",
    "TrainConfig",
    "TrainData",
    "cross_entropy",
    "lr_schedule",
    "sgd_step",
    "train",
    "EvalReport",
    "PredictionRecord",
    "evaluate",
    "roc_auc",
    "wta_aggregate",
    "__version__",
]
