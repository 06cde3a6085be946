"""Shifted-window 3D encoder-decoder for short-range weather nowcasting, on numpy."""

__version__ = "0.1.0"

from .data import Sample, SynthParams, augment, generate_sequence, make_batch, read_tensor, write_tensor
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, SwinNowError
from .metric import PERSISTENCE, VARIABLES, masked_mse, persistence_baseline, persistence_weight, score
from .model import MICRO, VERSIONS, ModelConfig, NowcastModel, build, count_params, load_checkpoint, save_checkpoint
from .optim import TrainState, adam_step, lr_schedule
from .train import DESK, RunConfig, evaluate

__all__ = [
    "ConfigError", "ContractError", "DESK", "DimensionError", "FormatError", "MICRO", "ModelConfig",
    "NowcastModel", "NumericError", "PERSISTENCE", "RunConfig", "Sample", "SwinNowError", "SynthParams",
    "TrainState", "VARIABLES", "VERSIONS", "adam_step", "augment", "build", "count_params", "evaluate",
    "generate_sequence", "load_checkpoint", "lr_schedule", "make_batch", "masked_mse", "persistence_baseline",
    "persistence_weight", "read_tensor", "save_checkpoint", "score", "write_tensor",
]
