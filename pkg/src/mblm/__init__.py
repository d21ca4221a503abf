"""Multi-branch multilingual students distilled from monolingual teachers, in numpy."""

from .distill import TrainPlan, Trainer, evaluate, kd_loss
from .errors import ConfigError, ContractError, DataError, MblmError, ShapeError
from .model import MblmModel, ModelConfig, StructureVariant, init_from_base, mblm_forward
from .synth import TaskConfig, build_splits
from .tensor import Tensor, backward, detach, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "MblmError",
    "MblmModel",
    "ModelConfig",
    "ShapeError",
    "StructureVariant",
    "TaskConfig",
    "Tensor",
    "TrainPlan",
    "Trainer",
    "backward",
    "build_splits",
    "detach",
    "evaluate",
    "init_from_base",
    "kd_loss",
    "mblm_forward",
    "no_grad",
]
