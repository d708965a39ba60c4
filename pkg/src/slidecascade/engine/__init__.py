"""Dense-tensor substrate: autodiff, layers, optimizer, verification, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import finite_diff_check
from .nn import (
    ChannelLayerNorm,
    Conv2d,
    ConvNeXtBlock,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    ModuleList,
    Parameter,
    WindowAttention,
    trunc_normal,
    windowed_attention,
)
from .ops import bicubic_matrix, bicubic_resize, conv2d
from .optim import Adam, adam_step
from .tensor import Tensor, as_tensor, concatenate, matmul, maximum_scalar, no_grad, softmax, stack

__all__ = [
    "Adam",
    "ChannelLayerNorm",
    "Conv2d",
    "ConvNeXtBlock",
    "LayerNorm",
    "Linear",
    "Mlp",
    "Module",
    "ModuleList",
    "Parameter",
    "Tensor",
    "WindowAttention",
    "adam_step",
    "as_tensor",
    "bicubic_matrix",
    "bicubic_resize",
    "concatenate",
    "conv2d",
    "finite_diff_check",
    "load_checkpoint",
    "matmul",
    "maximum_scalar",
    "no_grad",
    "save_checkpoint",
    "softmax",
    "stack",
    "trunc_normal",
    "windowed_attention",
]
