"""Outlier-safe pre-training experiments on a byte-level transformer in numpy."""

from .model import ModelConfig, backward, forward, init_params
from .optim import Hyper, ScheduleConfig, lr_multiplier
from .quant import QuantConfig, absorb_emb_proj, fold_hadamard, perplexity
from .config import TrainConfig, load_config, parse_config
from .trainer import train

__all__ = [
    "ModelConfig", "init_params", "forward", "backward",
    "Hyper", "ScheduleConfig", "lr_multiplier",
    "QuantConfig", "fold_hadamard", "absorb_emb_proj", "perplexity",
    "TrainConfig", "load_config", "parse_config", "train",
]

__version__ = "0.1.0"
