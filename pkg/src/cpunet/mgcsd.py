"""Multi-group channel shifted downsampling (MgCSD).

A stage halves the spatial resolution with two branches:

* left: channel groups are translated diagonally (``group_shift``), a stride-1
  "supply" convolution restores the detail lost at the displaced border, the
  sum is re-weighted by its own global average (``gap(S) * S``) and then
  downsampled by a stride-2 convolution;
* right: a plain stride-2 convolution.

A one-channel sigmoid map computed from ``F_L + F_R`` gates both branches:
``F = O * F_L + O * F_R``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .errors import ConfigError, DimensionError
from .layers import Conv2d


@dataclass(frozen=True)
class MgCsdConfig:
    in_channels: int
    out_channels: int
    groups: int = 4
    shift_step: int = 1
    kernel_size: int = 3
    cyclic: bool = False

    def __post_init__(self):
        if self.groups < 1 or self.shift_step < 1:
            raise ConfigError("groups and shift_step must be >= 1")
        if self.in_channels % self.groups:
            raise ConfigError(
                f"in_channels={self.in_channels} is not divisible by groups={self.groups}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def max_shift(self) -> int:
        return self.shift_step * (self.groups - 1)


def _check_shift(c: int, h: int, w: int, groups: int, step: int) -> None:
    if groups < 1 or step < 1:
        raise ConfigError("groups and step must be >= 1")
    if c % groups:
        raise ConfigError(f"{c} channels cannot be split into {groups} groups")
    if step * (groups - 1) >= min(h, w):
        raise ConfigError(
            f"largest shift {step * (groups - 1)} does not fit a {h}x{w} grid")


def _translate(a: np.ndarray, s: int, cyclic: bool, inverse: bool = False) -> np.ndarray:
    """Move content up ``s`` rows and right ``s`` columns (or back, if inverse)."""
    if s == 0:
        return a.copy()
    if cyclic:
        return np.roll(a, (s, -s) if inverse else (-s, s), axis=(1, 2))
    _, h, w = a.shape
    out = np.zeros_like(a)
    if inverse:
        out[:, s:, :w - s] = a[:, :h - s, s:]
    else:
        out[:, :h - s, s:] = a[:, s:, :w - s]
    return out


def group_shift(x: Tensor, groups: int, step: int = 1, cyclic: bool = False) -> Tensor:
    """Shift channel group ``i`` up and right by ``i * step`` pixels.

    Group 0 stays in place.  Vacated cells are zero unless ``cyclic`` is set,
    in which case the displaced rows/columns wrap around.
    """
    c, h, w = x.shape
    _check_shift(c, h, w, groups, step)
    size = c // groups

    def apply(a, inverse):
        out = np.empty_like(a)
        for i in range(groups):
            sl = slice(i * size, (i + 1) * size)
            out[sl] = _translate(a[sl], i * step, cyclic, inverse)
        return out

    return Tensor.from_op(apply(x.data, False), (x,), lambda g: (apply(g, True),))


class MgCsdStage(Module):
    def __init__(self, config: MgCsdConfig, rng: np.random.Generator):
        self.config = config
        k = config.kernel_size
        c_in, c_out = config.in_channels, config.out_channels
        self.supply = Conv2d(c_in, c_in, k, rng)
        self.left_down = Conv2d(c_in, c_out, k, rng, stride=2)
        self.right = Conv2d(c_in, c_out, k, rng, stride=2)
        self.mixer = Conv2d(c_out, 1, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return forward(x, self)


def reweighted_sum(x: Tensor, stage: MgCsdStage) -> Tensor:
    """Full-resolution left-branch map ``gap(S) * S`` with ``S = shift(x) + supply(x)``."""
    cfg = stage.config
    s = ad.add(group_shift(x, cfg.groups, cfg.shift_step, cfg.cyclic), stage.supply(x))
    return ad.elementwise("broadcast_mul", s, ad.gap(s))


def left_branch(x: Tensor, stage: MgCsdStage) -> Tensor:
    _, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"MgCSD needs even spatial dims, got {h}x{w}")
    return stage.left_down(reweighted_sum(x, stage))


def right_branch(x: Tensor, stage: MgCsdStage) -> Tensor:
    return stage.right(x)


def mixer_gate(f_l: Tensor, f_r: Tensor, stage: MgCsdStage) -> Tensor:
    """Spatial gate ``O = sigmoid(conv1x1(F_L + F_R))`` of shape ``[1, h, w]``."""
    if f_l.shape != f_r.shape:
        raise DimensionError(f"F_L {f_l.shape} and F_R {f_r.shape} differ")
    return ad.sigmoid(stage.mixer(ad.add(f_l, f_r)))


def fuse(f_l: Tensor, f_r: Tensor, stage: MgCsdStage, gate: Tensor | None = None) -> Tensor:
    """``O * F_L + O * F_R``; ``gate`` overrides the mixer output when given."""
    o = mixer_gate(f_l, f_r, stage) if gate is None else gate
    return ad.add(ad.elementwise("broadcast_mul", f_l, o), ad.elementwise("broadcast_mul", f_r, o))


def forward(x: Tensor, stage: MgCsdStage) -> Tensor:
    cfg = stage.config
    c, h, w = x.shape
    if c != cfg.in_channels:
        raise DimensionError(f"stage expects {cfg.in_channels} channels, got {c}")
    if h % 2 or w % 2 or min(h, w) < 2 * cfg.kernel_size:
        raise DimensionError(
            f"MgCSD input must be even and at least {2 * cfg.kernel_size} per side, got {h}x{w}")
    return fuse(left_branch(x, stage), right_branch(x, stage), stage)
