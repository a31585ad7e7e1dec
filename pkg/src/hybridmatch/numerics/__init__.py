"""Minimal tensor library with reverse-mode differentiation."""

from . import ops
from .gradcheck import check_gradients, relative_error
from .nn import BatchNorm2d, Conv1d, Conv2d, LayerNorm, Linear, Module, ModuleList, parameter
from .ops import (
    batch_norm,
    bilinear_resize,
    conv1d,
    conv2d,
    layer_norm,
    linear,
    softmax,
)
from .tensor import Tape, Tensor, backward, current_tape, inject_backward_fault, no_grad, record

__all__ = [
    "BatchNorm2d", "Conv1d", "Conv2d", "LayerNorm", "Linear", "Module", "ModuleList", "Tape",
    "Tensor", "backward", "batch_norm", "bilinear_resize", "check_gradients", "conv1d", "conv2d",
    "current_tape", "inject_backward_fault", "layer_norm", "linear", "no_grad", "ops", "parameter",
    "record", "relative_error", "softmax",
]
