from .adam import Adam
from .encoder import EncoderSpec, PointEncoder, encode, init_params, zero_params
from .model import DeepPamModel, PedBatch, forward_batch, loss_and_grads, make_batch
from .train import TrainConfig, TrainingError, fit_deeppam

__all__ = [
    "Adam", "EncoderSpec", "PointEncoder", "encode", "init_params", "zero_params",
    "DeepPamModel", "PedBatch", "forward_batch", "loss_and_grads", "make_batch",
    "TrainConfig", "TrainingError", "fit_deeppam",
]
