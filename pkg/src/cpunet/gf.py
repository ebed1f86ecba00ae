"""Gating-based feature filtering for decoder stages."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .errors import ConfigError, DimensionError
from .layers import Conv2d, Linear


class StageBundle(NamedTuple):
    up: Tensor
    skip: Tensor
    contour: Tensor


def fuse_inputs(bundle: StageBundle) -> Tensor:
    """Elementwise ``F_up + F_skip + F_contour``."""
    ref = bundle.up.shape
    for field in ("skip", "contour"):
        shape = getattr(bundle, field).shape
        if shape != ref:
            raise DimensionError(f"F_{field} has shape {shape}, F_up has {ref}")
    return ad.add(ad.add(bundle.up, bundle.skip), bundle.contour)


class GfLayer(Module):
    """Gate ``G = GELU(conv3x3(F))`` scaling a spatial embedding ``E = Linear(F)``.

    The linear map acts on the flattened ``h*w`` axis and is shared by all
    channels.
    """

    def __init__(self, channels: int, height: int, width: int, rng: np.random.Generator,
                 linear_init: str = "kaiming"):
        self.channels, self.height, self.width = channels, height, width
        self.gate_conv = Conv2d(channels, channels, 3, rng)
        self.linear = Linear(height * width, height * width, rng, init=linear_init)

    @property
    def n(self) -> int:
        return self.height * self.width

    def __call__(self, f: Tensor) -> Tensor:
        return gate(f, self)


def gate_signal(f: Tensor, layer: GfLayer) -> Tensor:
    c, h, w = f.shape
    return ad.reshape(ad.gelu(layer.gate_conv(f)), (c, h * w))


def embedding(f: Tensor, layer: GfLayer) -> Tensor:
    c, h, w = f.shape
    return layer.linear(ad.reshape(f, (c, h * w)))


def gate(f: Tensor, layer: GfLayer, signal: Tensor | None = None) -> Tensor:
    """``F_gate[ch, p] = G[ch, p] * E[ch, p]`` reshaped back to ``[c, h, w]``.

    ``signal`` replaces the computed gate when given (used to pin the gate open).
    """
    c, h, w = f.shape
    if h * w != layer.n:
        raise ConfigError(f"GF layer embeds {layer.n} positions, input has {h}x{w}={h * w}")
    if c != layer.channels:
        raise DimensionError(f"GF layer has {layer.channels} channels, input has {c}")
    g = gate_signal(f, layer) if signal is None else signal
    return ad.reshape(ad.mul(g, embedding(f, layer)), (c, h, w))


class UpBlock(Module):
    """Nearest-neighbour x2 upsampling followed by a 3x3 convolution."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ad.upsample_nearest2x(x))
