"""Contour probabilistic modelling.

A small convolutional extractor maps the deepest encoder map to ``K``
diagonal Gaussians over a ``d``-dimensional contour feature.  Each decoder
stage draws a contour vector ``G = Omega s`` where ``s_k`` is the mean over
``d`` of the reparameterised sample ``z_k * sigma_k + mu_k``.  During training a
second extractor of the same architecture encodes a boundary band cut out of
the input image, and the closed-form Gaussian KL pulls the first bank toward
the second.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .errors import ConfigError, ContractError, DimensionError, NumericalError
from .layers import Conv2d, Linear

SIGMA_FLOOR = 1e-6
MIN_EXTRACTOR_SIZE = 2


@dataclass
class GaussianBank:
    """``K`` diagonal Gaussians over ``d`` features; ``mu`` and ``sigma`` are ``[K, d]``."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or len(self.mu.shape) != 2:
            raise DimensionError(f"mu {self.mu.shape} and sigma {self.sigma.shape} must be equal [K, d]")

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]


class ContourExtractor(Module):
    """Four stride-2 conv+GELU blocks, global average pooling, and two linear heads."""

    def __init__(self, in_channels: int, k: int, d: int, rng: np.random.Generator,
                 width: int = 16, blocks: int = 4):
        if k < 1 or d < 1:
            raise ConfigError("K and d must be >= 1")
        self.k, self.d = k, d
        chans = [in_channels] + [width] * blocks
        self.blocks = [Conv2d(a, b, 3, rng, stride=2) for a, b in zip(chans[:-1], chans[1:])]
        self.mu_head = Linear(width, k * d, rng)
        self.sigma_head = Linear(width, k * d, rng)

    def __call__(self, x: Tensor) -> GaussianBank:
        _, h, w = x.shape
        if min(h, w) < MIN_EXTRACTOR_SIZE:
            raise ConfigError(
                f"contour extractor needs at least {MIN_EXTRACTOR_SIZE}x{MIN_EXTRACTOR_SIZE} input, got {h}x{w}")
        for block in self.blocks:
            x = ad.gelu(block(x))
        pooled = ad.reshape(ad.gap(x), (1, -1))
        mu = ad.reshape(self.mu_head(pooled), (self.k, self.d))
        pre_sigma = ad.reshape(self.sigma_head(pooled), (self.k, self.d))
        return GaussianBank(mu, ad.add(ad.softplus(pre_sigma), Tensor(SIGMA_FLOOR)))


def extract_bank(encoder_outputs: Sequence[Tensor], extractor: ContourExtractor) -> GaussianBank:
    """Fit the bank from the deepest encoder map."""
    if not encoder_outputs:
        raise ConfigError("extract_bank needs at least one encoder output")
    return extractor(encoder_outputs[-1])


def init_omega(channels: int, k: int) -> Parameter:
    return Parameter(np.full((channels, k), 1.0 / k))


def draw_noise(k: int, d: int, rng: np.random.Generator, shared: bool = False) -> np.ndarray:
    """Standard-normal draws, independent per component unless ``shared``."""
    if shared:
        return np.tile(rng.standard_normal(d), (k, 1))
    return rng.standard_normal((k, d))


def resample(bank: GaussianBank, omega: Tensor, z: np.ndarray) -> Tensor:
    """``Omega @ mean_d(z * sigma + mu)`` as a length-``T`` vector."""
    if omega.data.ndim != 2 or omega.shape[1] != bank.k:
        raise DimensionError(f"Omega {omega.shape} does not have K={bank.k} columns")
    if z.shape != bank.mu.shape:
        raise DimensionError(f"noise {z.shape} does not match bank {bank.mu.shape}")
    s = ad.mean(ad.add(ad.mul(Tensor(z), bank.sigma), bank.mu), axis=1, keepdims=True)
    return ad.reshape(ad.matmul(omega, s), (omega.shape[0],))


def reparam_sample(bank: GaussianBank, omega: Tensor, rng: np.random.Generator,
                   shared_z: bool = False) -> Tensor:
    return resample(bank, omega, draw_noise(bank.k, bank.d, rng, shared_z))


# ----------------------------------------------------------------------------
# boundary-band target
# ----------------------------------------------------------------------------

class MaskProcessed(NamedTuple):
    target: np.ndarray
    degenerate: bool


def contour_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one in-grid 4-neighbour outside the mask."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=True)
    outside_neighbour = (
        ~padded[:-2, 1:-1] | ~padded[2:, 1:-1] | ~padded[1:-1, :-2] | ~padded[1:-1, 2:]
    )
    return m & outside_neighbour


def boundary_band(mask: np.ndarray, band: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``band`` of the mask contour."""
    if band < 1:
        raise ConfigError(f"band must be >= 1, got {band}")
    contour = contour_pixels(mask)
    return ndimage.maximum_filter(contour.astype(np.uint8), size=2 * band + 1,
                                  mode="constant", cval=0).astype(bool)


def mask_process(image: np.ndarray, mask: np.ndarray, band: int) -> MaskProcessed:
    """Keep the image only inside the boundary band of ``mask``.

    ``degenerate`` is set when the mask has no contour (empty or full), in
    which case the target is all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != np.shape(mask):
        raise DimensionError(f"image {image.shape} and mask {np.shape(mask)} differ")
    b = boundary_band(mask, band)
    return MaskProcessed(image * b, not b.any())


# ----------------------------------------------------------------------------
# KL alignment
# ----------------------------------------------------------------------------

def kl_align(bank_a: GaussianBank, bank_b: GaussianBank, grad_to_target: bool = False) -> Tensor:
    """Mean over all ``K*d`` coordinates of KL(N(mu_A, sigma_A) || N(mu_B, sigma_B)).

    ``bank_b`` is a stop-gradient target unless ``grad_to_target`` is set.
    """
    if bank_a.mu.shape != bank_b.mu.shape:
        raise DimensionError(f"bank shapes differ: {bank_a.mu.shape} vs {bank_b.mu.shape}")
    for label, bank in (("A", bank_a), ("B", bank_b)):
        if not (np.all(np.isfinite(bank.sigma.data)) and np.all(np.isfinite(bank.mu.data))):
            raise NumericalError(f"bank {label} has non-finite parameters")
        if not np.all(bank.sigma.data > 0):
            raise ContractError(f"bank {label} has non-positive sigma")
    mu_b, sigma_b = bank_b.mu, bank_b.sigma
    if not grad_to_target:
        mu_b, sigma_b = ad.detach(mu_b), ad.detach(sigma_b)
    log_ratio = ad.sub(ad.log(sigma_b), ad.log(bank_a.sigma))
    spread = ad.add(ad.square(bank_a.sigma), ad.square(ad.sub(bank_a.mu, mu_b)))
    quad = ad.div(spread, ad.scale(ad.square(sigma_b), 2.0))
    return ad.mean(ad.sub(ad.add(log_ratio, quad), Tensor(0.5)))
