"""Synthetic ultrasound-like images with blurred lesion contours.

Each sample is a dark lesion on a smooth textured background.  The lesion
edge is Gaussian-blurred, the whole frame gets multiplicative speckle, and
optional bright horizontal streaks imitate reverberation artifacts.  The
mask is the crisp lesion indicator.  Pixel values are quantised to
multiples of 1/255 so the samples survive an 8-bit round trip unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError

SHAPE_FAMILIES = ("ellipse", "perturbed-ellipse", "crescent")
MAX_RETRIES = 100

BACKGROUND_LEVEL = 0.55
BACKGROUND_TEXTURE = 0.08
LESION_LEVEL = 0.15
LESION_TEXTURE = 0.03


@dataclass
class SynthSpec:
    count: int = 16
    size: tuple[int, int] = (64, 64)
    blur_sigma_range: tuple[float, float] = (0.5, 2.0)
    speckle_strength: float = 0.1
    shape_family: str = "perturbed-ellipse"
    overlap_artifacts: bool = True
    area_range: tuple[float, float] = (0.03, 0.35)
    margin: int = 4

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        self.area_range = tuple(float(v) for v in self.area_range)

    def validate(self) -> None:
        lo, hi = self.blur_sigma_range
        if self.count < 0:
            raise ConfigError("count must be >= 0")
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad blur_sigma_range {self.blur_sigma_range}")
        if self.speckle_strength < 0:
            raise ConfigError("speckle_strength must be >= 0")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ConfigError(f"shape_family must be one of {SHAPE_FAMILIES}")
        if not 0 < self.area_range[0] < self.area_range[1] <= 1:
            raise ConfigError(f"bad area_range {self.area_range}")
        if min(self.size) <= 2 * self.margin + 2:
            raise ConfigError(f"size {self.size} leaves no room inside margin {self.margin}")


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray


def _texture(shape, rng, smooth: float) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal(shape), smooth, mode="wrap")
    return t / max(np.abs(t).max(), 1e-12)


def render_background(size, rng: np.random.Generator) -> np.ndarray:
    return BACKGROUND_LEVEL + BACKGROUND_TEXTURE * _texture(size, rng, 2.0)


def _lesion_mask(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(0.3, 0.7) * h
    cx = rng.uniform(0.3, 0.7) * w
    a = rng.uniform(0.12, 0.28) * h
    b = rng.uniform(0.12, 0.28) * w
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    radius = np.hypot(u / b, v / a)
    if spec.shape_family == "perturbed-ellipse":
        phi = np.arctan2(v, u)
        wobble = 1.0
        for m in (2, 3, 4, 5):
            wobble = wobble + rng.uniform(0.0, 0.08) * np.cos(m * phi + rng.uniform(0, 2 * np.pi))
        return radius <= wobble
    inside = radius <= 1.0
    if spec.shape_family == "crescent":
        off = rng.uniform(0.35, 0.6)
        ang = rng.uniform(0, 2 * np.pi)
        bite = np.hypot((u - off * b * np.cos(ang)) / (0.85 * b),
                        (v - off * a * np.sin(ang)) / (0.85 * a)) <= 1.0
        inside &= ~bite
    return inside


def _fits(mask: np.ndarray, spec: SynthSpec) -> bool:
    if not mask.any():
        return False
    frac = mask.mean()
    if not spec.area_range[0] <= frac <= spec.area_range[1]:
        return False
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    m = spec.margin
    return rows[0] >= m and cols[0] >= m and rows[-1] <= h - 1 - m and cols[-1] <= w - 1 - m


def generate_sample(spec: SynthSpec, rng: np.random.Generator) -> Sample:
    for _ in range(MAX_RETRIES):
        mask = _lesion_mask(spec, rng)
        if _fits(mask, spec):
            break
    else:
        raise GenerationError(f"could not place a lesion in {MAX_RETRIES} attempts for {spec}")

    h, w = spec.size
    background = render_background(spec.size, rng)
    lesion = LESION_LEVEL + LESION_TEXTURE * _texture(spec.size, rng, 1.0)
    sigma = rng.uniform(*spec.blur_sigma_range)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma) if sigma > 0 else mask.astype(np.float64)
    image = background * (1.0 - soft) + lesion * soft

    if spec.overlap_artifacts:
        rows = np.arange(h, dtype=np.float64)[:, None]
        cols = np.arange(w)[None, :]
        for _ in range(rng.integers(0, 3)):
            r = rng.uniform(0, h)
            x0 = rng.integers(0, w // 2)
            x1 = rng.integers(x0 + w // 4, w + 1)
            profile = np.exp(-0.5 * ((rows - r) / rng.uniform(0.6, 1.5)) ** 2)
            image = image + rng.uniform(0.1, 0.25) * profile * ((cols >= x0) & (cols < x1))

    if spec.speckle_strength > 0:
        shape_k = 1.0 / spec.speckle_strength ** 2
        image = image * rng.gamma(shape_k, 1.0 / shape_k, size=image.shape)

    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return Sample(image, mask)


def generate_dataset(spec: SynthSpec, seed: int) -> list[Sample]:
    """Generate ``spec.count`` samples; sample ``i`` depends only on ``(seed, i)``."""
    spec.validate()
    return [generate_sample(spec, np.random.default_rng([seed, i])) for i in range(spec.count)]
