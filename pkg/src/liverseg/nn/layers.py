"""Parameterized building blocks shared by the architecture families."""

from __future__ import annotations

import math

import numpy as np

from liverseg import autodiff as ad
from liverseg.autodiff import Tensor


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"

    def leaves(self, prefix: str):
        return [(prefix, self)]

    def named_parameters(self, prefix: str):
        return []

    def named_buffers(self, prefix: str):
        return []


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(he_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self, prefix):
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out


class ConvTranspose2d(Layer):
    kind = "conv_transpose"

    def __init__(self, rng, cin: int, cout: int, k: int = 2, stride: int = 2):
        self.stride = stride
        # each output pixel sees cin * (k/stride)^2 inputs
        fan_in = max(1, cin * k * k // (stride * stride))
        self.weight = Tensor(he_uniform(rng, (cin, cout, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride)

    def named_parameters(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = ad.RunningStats.fresh(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batchnorm2d(x, self.gamma, self.beta, self.stats, training)

    def named_parameters(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_buffers(self, prefix):
        return [(f"{prefix}.running_mean", self.stats.mean), (f"{prefix}.running_var", self.stats.var)]


class ConvBNReLU(Layer):
    """conv -> [batchnorm] -> relu; the conv drops its bias when BN follows."""

    kind = "block"

    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1,
                 batchnorm: bool = True, activation: bool = True):
        self.conv = Conv2d(rng, cin, cout, k, stride, bias=not batchnorm)
        self.bn = BatchNorm2d(cout) if batchnorm else None
        self.activation = activation

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y, training)
        return ad.relu(y) if self.activation else y

    def leaves(self, prefix):
        out = [(f"{prefix}.conv", self.conv)]
        if self.bn is not None:
            out.append((f"{prefix}.bn", self.bn))
        return out
