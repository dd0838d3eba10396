from .checkpoint import CheckpointError, load_params, read_checkpoint, save_params, write_checkpoint
from .core import ShapeError, Tensor, backward, get_dtype, grad_enabled, no_grad, precision, set_precision
from .ops import (
    add,
    avgpool_down,
    clamp,
    concat_channels,
    conv2d,
    dense,
    log,
    maxpool2,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    square_sum,
    sub,
    sum_all,
    take_channel,
)
from .params import AdamState, ModelParams, adam_step, conv_layer, he_normal

__all__ = [
    "AdamState",
    "CheckpointError",
    "ModelParams",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "avgpool_down",
    "backward",
    "clamp",
    "concat_channels",
    "conv2d",
    "conv_layer",
    "dense",
    "get_dtype",
    "grad_enabled",
    "he_normal",
    "load_params",
    "log",
    "maxpool2",
    "mul",
    "no_grad",
    "precision",
    "read_checkpoint",
    "relu",
    "reshape",
    "save_params",
    "scale",
    "set_precision",
    "sigmoid",
    "square_sum",
    "sub",
    "sum_all",
    "take_channel",
    "write_checkpoint",
]
