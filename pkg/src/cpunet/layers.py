"""Parameterised building blocks: convolution and dense layers."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Square odd-kernel convolution with "same" padding and an optional bias."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        self.stride = stride
        self.padding = kernel_size // 2
        fan_in = c_in * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform((c_out, c_in, kernel_size, kernel_size), fan_in, rng))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    """``y = x W + b`` applied to the rows of a ``[m, n_in]`` matrix."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "kaiming"):
        if init == "kaiming":
            w = kaiming_uniform((n_in, n_out), n_in, rng)
        elif init == "identity":
            if n_in != n_out:
                raise ValueError("identity init needs a square layer")
            w = np.eye(n_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)
