"""Parameterised layers built on :mod:`sdkit.core.ops`."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, as_tensor


class Module:
    """Parameter container; attributes that are parameters or modules are walked in order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def kaiming_uniform(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """He/Kaiming uniform init over fan-in, gain sqrt(2) for ReLU."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvLayer(Module):
    """k x k convolution with bias; padding defaults to (k - 1) / 2."""

    def __init__(self, in_channels, out_channels, k=3, stride=1, padding=None,
                 pad_mode="zeros", rng=None, dtype=np.float64):
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, k, k), dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.pad_mode = pad_mode

    @property
    def k(self):
        return self.weight.shape[-1]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return conv2d(x, self)


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


def conv2d(x, layer: ConvLayer) -> Tensor:
    """Standard convolution; accepts ``C x H x W`` or ``N x C x H x W`` input."""
    xb, squeeze = _batched(x)
    if xb.ndim != 4 or xb.shape[1] != layer.in_channels:
        raise ValueError(
            f"conv2d shape mismatch: input shape {tuple(as_tensor(x).shape)} vs "
            f"layer weight shape {layer.weight.shape}")
    out = ops.conv2d_raw(xb, layer.weight, layer.bias, layer.stride, layer.padding, layer.pad_mode)
    return ops.reshape(out, out.shape[1:]) if squeeze else out


def pointwise_conv(x, layer: ConvLayer) -> Tensor:
    """Per-pixel linear map across channels (1 x 1 convolution)."""
    if layer.k != 1:
        raise ValueError(f"pointwise_conv needs a 1x1 layer, got k={layer.k}")
    return conv2d(x, layer)


def si_conv2d(x, mask, layer: ConvLayer, eps: float = 1e-8):
    """Sparsity-invariant convolution; returns ``(features, output_mask)``."""
    xb, squeeze = _batched(x)
    if xb.shape[1] != layer.in_channels:
        raise ValueError(
            f"si_conv2d shape mismatch: input shape {tuple(as_tensor(x).shape)} vs "
            f"layer weight shape {layer.weight.shape}")
    out, m = ops.si_conv2d_raw(xb, mask, layer.weight, layer.bias,
                               layer.stride, layer.padding, eps)
    if squeeze:
        return ops.reshape(out, out.shape[1:]), m[0, 0]
    return out, m


class ResidualBlock(Module):
    """``x + conv(relu(conv(x)))`` at constant width."""

    def __init__(self, channels, k=3, rng=None, dtype=np.float64):
        self.conv1 = ConvLayer(channels, channels, k, rng=rng, dtype=dtype)
        self.conv2 = ConvLayer(channels, channels, k, rng=rng, dtype=dtype)

    def __call__(self, x):
        return residual_block(x, self)


def residual_block(x, block: ResidualBlock) -> Tensor:
    x = as_tensor(x)
    c = x.shape[-3]
    if c != block.conv1.in_channels or block.conv2.out_channels != c:
        raise ValueError(
            f"residual block expects {block.conv1.in_channels} channels "
            f"in and out, got input shape {x.shape}")
    return ops.add(x, conv2d(ops.relu(conv2d(x, block.conv1)), block.conv2))


def _check_even(x: Tensor, what: str):
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"{what} needs even spatial size, got {h}x{w}")


class Downsample(Module):
    """Stride-2 3x3 convolution (replicate padding)."""

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float64):
        self.conv = ConvLayer(in_channels, out_channels, 3, stride=2, pad_mode="edge",
                              rng=rng, dtype=dtype)

    def __call__(self, x):
        return downsample2x(x, self)


class Upsample(Module):
    """Nearest-neighbour x2 followed by a 3x3 convolution (replicate padding)."""

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float64):
        self.conv = ConvLayer(in_channels, out_channels, 3, pad_mode="edge", rng=rng, dtype=dtype)

    def __call__(self, x):
        return upsample2x(x, self)


def downsample2x(x, layer: Downsample) -> Tensor:
    x = as_tensor(x)
    _check_even(x, "downsample2x")
    return conv2d(x, layer.conv)


def upsample2x(x, layer: Upsample) -> Tensor:
    xb, squeeze = _batched(x)
    out = conv2d(ops.upsample_nearest2x(xb), layer.conv)
    return ops.reshape(out, out.shape[1:]) if squeeze else out
