from .arch import Architecture, LayerSpec, param_count, receptive_field
from .model import (
    DEFAULT_ARCH, NetworkParams, NonFiniteLossError, center_logits, forward, forward_logits,
    init_params, loss_and_grad, softmax,
)
from .train import LabeledStack, PatchSampler, TrainConfig, TrainedModel, sample_minibatch, train
from .infer import infer_volume
from .checkpoint import load_params, save_params

__all__ = [
    "Architecture", "LayerSpec", "param_count", "receptive_field",
    "DEFAULT_ARCH", "NetworkParams", "NonFiniteLossError", "center_logits", "forward",
    "forward_logits", "init_params", "loss_and_grad", "softmax",
    "LabeledStack", "PatchSampler", "TrainConfig", "TrainedModel", "sample_minibatch", "train",
    "infer_volume", "load_params", "save_params",
]
