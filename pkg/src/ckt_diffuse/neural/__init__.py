"""Networks, training loops and the generation pipeline."""

from .autograd import (Tensor, bce_with_logits, concat, mse_loss, sigmoid,
                       softmax, softmax_cross_entropy)
from .generate import GenResult, generate
from .models import (CheckpointError, CountConfig, CountPredictor, Denoiser,
                     DenoiserConfig, load_checkpoint, save_checkpoint,
                     time_embedding)
from .train import (Adam, TrainingDiverged, group_examples, train_continuous,
                    train_count, train_discrete)

__all__ = [
    "Adam", "CheckpointError", "CountConfig", "CountPredictor", "Denoiser",
    "DenoiserConfig", "GenResult", "Tensor", "TrainingDiverged",
    "bce_with_logits", "concat", "generate", "group_examples",
    "load_checkpoint", "mse_loss", "save_checkpoint", "sigmoid", "softmax",
    "softmax_cross_entropy", "time_embedding", "train_continuous",
    "train_count", "train_discrete",
]
