from . import ops
from .layers import (ConvLayer, Downsample, Module, ResidualBlock, Upsample, conv2d,
                     downsample2x, pointwise_conv, residual_block, si_conv2d, upsample2x)
from .ops import EmptyMaskWarning
from .tensor import Parameter, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "ConvLayer", "Downsample", "EmptyMaskWarning", "Module", "Parameter", "ResidualBlock",
    "Tensor", "Upsample", "as_tensor", "backward", "conv2d", "downsample2x", "grad_enabled",
    "no_grad", "ops", "pointwise_conv", "residual_block", "si_conv2d", "upsample2x",
]
