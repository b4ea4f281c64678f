"""Small numpy autodiff core: tensors, layers, Adam, seeded streams, checkpoints."""

from dhal.nn.layers import (
    Conv1dSpec,
    MlpSpec,
    ParamStore,
    conv1d_forward,
    init_conv1d,
    init_mlp,
    mlp_forward,
)
from dhal.nn.optim import Adam, AdamState, adam_step
from dhal.nn.rng import RngStream
from dhal.nn.tensor import Tensor, backward, precision

__all__ = [
    "Adam",
    "AdamState",
    "Conv1dSpec",
    "MlpSpec",
    "ParamStore",
    "RngStream",
    "Tensor",
    "adam_step",
    "backward",
    "conv1d_forward",
    "init_conv1d",
    "init_mlp",
    "mlp_forward",
    "precision",
]
