"""Sparse all-MLP language models on a small numpy autograd engine."""

from .model import ModelConfig, build_model, forward_lm, lm_loss
from .train import TrainConfig, TrainState, evaluate_ppl, train, train_step

__all__ = ["ModelConfig", "build_model", "forward_lm", "lm_loss",
           "TrainConfig", "TrainState", "evaluate_ppl", "train", "train_step"]
__version__ = "0.1.0"
