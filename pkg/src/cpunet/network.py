"""CP-UNet assembly: stem, encoder stages, contour branch, gated decoder, head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import cpm
from .autodiff import Module, Parameter, Tensor
from .errors import ConfigError, DimensionError, IntegrityError
from .gf import GfLayer, StageBundle, UpBlock, fuse_inputs
from .layers import Conv2d
from .mgcsd import MgCsdConfig, MgCsdStage


@dataclass
class CpUnetConfig:
    stages: int = 4
    base_channels: int = 16
    input_size: tuple[int, int] = (64, 64)
    k: int = 4
    contour_dim: int = 8
    groups: int = 4
    shift_step: int = 1
    enable_mgcsd: bool = True
    enable_cpm: bool = True
    enable_gf: bool = True
    band: int = 3
    seed: int = 0
    extractor_width: int = 16
    cyclic_shift: bool = False
    shared_z: bool = False
    redraw_per_stage: bool = False
    kl_grad_to_target: bool = False
    gf_linear_init: str = "identity"
    # fixed input normalisation: centre on the generator's mean pixel (0.5) and scale to
    # about half unit variance (pixel std is about 0.135)
    input_mean: float = 0.5
    input_std: float = 0.27
    stem_gelu: bool = False

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.stages)]

    def decoder_channels(self) -> list[int]:
        """Channels of decoder level ``j`` (resolution ``input / 2**j``)."""
        return [self.base_channels] + self.encoder_channels()[:-1]

    def validate(self) -> None:
        h, w = self.input_size
        n = 2 ** self.stages
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if h % n or w % n:
            raise ConfigError(f"input size {h}x{w} is not divisible by 2**stages={n}")
        if self.band < 1:
            raise ConfigError("band must be >= 1")
        if not self.input_std > 0:
            raise ConfigError(f"input_std must be positive, got {self.input_std}")
        if self.enable_mgcsd:
            deepest_in = min(h, w) // 2 ** (self.stages - 1)
            if deepest_in < 6:
                raise ConfigError(f"MgCSD stage would see a {deepest_in}px map; need >= 6")
            if self.shift_step * (self.groups - 1) >= deepest_in:
                raise ConfigError("group shifts exceed the smallest encoder map")
            for c in [self.base_channels] + self.encoder_channels()[:-1]:
                if c % self.groups:
                    raise ConfigError(f"{c} channels not divisible by groups={self.groups}")
        if self.enable_cpm and min(h, w) // n < cpm.MIN_EXTRACTOR_SIZE:
            raise ConfigError("deepest encoder map is too small for the contour extractor")


class PlainDown(Module):
    """Stride-2 conv + GELU, stride-1 conv + GELU: the non-MgCSD encoder stage."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.down = Conv2d(c_in, c_out, 3, rng, stride=2)
        self.conv = Conv2d(c_out, c_out, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.gelu(self.conv(ad.gelu(self.down(x))))


class ConvBlock(Module):
    """3x3 conv + GELU: decoder fusion used when GF is disabled."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.gelu(self.conv(x))


class CpmBranch(Module):
    def __init__(self, config: CpUnetConfig, rng: np.random.Generator):
        deepest = config.encoder_channels()[-1]
        self.extractor = cpm.ContourExtractor(deepest, config.k, config.contour_dim, rng,
                                              width=config.extractor_width)
        self.target_extractor = cpm.ContourExtractor(1, config.k, config.contour_dim, rng,
                                                     width=config.extractor_width)
        self.omegas = [cpm.init_omega(c, config.k) for c in config.decoder_channels()]


class CpUnet(Module):
    def __init__(self, config: CpUnetConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        base = config.base_channels
        enc = config.encoder_channels()
        dec = config.decoder_channels()
        h, w = config.input_size

        self.stem = Conv2d(1, base, 3, rng)
        self.enc = []
        for i, c_out in enumerate(enc):
            c_in = base if i == 0 else enc[i - 1]
            if config.enable_mgcsd:
                self.enc.append(MgCsdStage(MgCsdConfig(c_in, c_out, config.groups, config.shift_step,
                                                       cyclic=config.cyclic_shift), rng))
            else:
                self.enc.append(PlainDown(c_in, c_out, rng))
        self.up = []
        self.dec = []
        for j, c in enumerate(dec):
            c_from = enc[j]
            self.up.append(UpBlock(c_from, c, rng))
            if config.enable_gf:
                self.dec.append(GfLayer(c, h // 2 ** j, w // 2 ** j, rng,
                                        linear_init=config.gf_linear_init))
            else:
                self.dec.append(ConvBlock(c, rng))
        self.head = Conv2d(base, 1, 1, rng)
        # built last so toggling CPM leaves every other initial value unchanged
        self.cpm = CpmBranch(config, rng) if config.enable_cpm else None
        name_parameters(self)

    def __call__(self, image, mask=None, rng=None) -> "ForwardOutput":
        return forward(image, self, mask=mask, rng=rng)


class ForwardOutput(NamedTuple):
    probs: Tensor
    bank_a: cpm.GaussianBank | None
    bank_b: cpm.GaussianBank | None
    contour_vectors: list[Tensor]
    kl: Tensor | None
    degenerate_target: bool = False


def _as_image(image, expected: tuple[int, int]) -> Tensor:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise DimensionError(f"expected a single-channel image, got shape {arr.shape}")
    if arr.shape[1:] != expected:
        raise ConfigError(f"image is {arr.shape[1]}x{arr.shape[2]}, model expects {expected[0]}x{expected[1]}")
    if isinstance(image, Tensor) and image.shape == arr.shape:
        return image
    return Tensor(arr)


def normalize(x: Tensor, mean: float, std: float) -> Tensor:
    """Fixed affine map ``(x - mean) / std`` applied to every image alike."""
    return Tensor((x.data - mean) / std)


def forward(image, model: CpUnet, mask=None, rng: np.random.Generator | None = None) -> ForwardOutput:
    """Run the network on one ``[h, w]`` (or ``[1, h, w]``) image.

    The image is mapped through ``(x - input_mean) / input_std`` before the
    stem convolution; the boundary-band target is cut from the raw image.  With ``mask`` the target branch is evaluated and the KL term returned.
    Contour noise is drawn from ``rng``; ``rng=None`` uses ``z = 0`` (the
    component means), which is what evaluation and prediction use.
    """
    cfg = model.config
    x = _as_image(image, cfg.input_size)

    feat = model.stem(normalize(x, cfg.input_mean, cfg.input_std))
    if cfg.stem_gelu:
        feat = ad.gelu(feat)
    skips = [feat]
    for stage in model.enc:
        feat = stage(feat)
        if cfg.enable_mgcsd:
            feat = ad.gelu(feat)
        skips.append(feat)
    encoder_outputs = skips[1:]

    bank_a = bank_b = kl = None
    degenerate = False
    contour_vectors: list[Tensor] = []
    if cfg.enable_cpm:
        bank_a = cpm.extract_bank(encoder_outputs, model.cpm.extractor)
        shape = (bank_a.k, bank_a.d)

        def noise():
            return np.zeros(shape) if rng is None else cpm.draw_noise(*shape, rng, cfg.shared_z)

        z = noise()
        for omega in model.cpm.omegas:
            if cfg.redraw_per_stage and contour_vectors:
                z = noise()
            contour_vectors.append(cpm.resample(bank_a, omega, z))
        if mask is not None:
            processed = cpm.mask_process(x.data[0], np.asarray(mask), cfg.band)
            degenerate = processed.degenerate
            bank_b = model.cpm.target_extractor(Tensor(processed.target[None]))
            kl = cpm.kl_align(bank_a, bank_b, grad_to_target=cfg.kl_grad_to_target)

    for j in reversed(range(cfg.stages)):
        up = model.up[j](feat)
        skip = skips[j]
        if cfg.enable_cpm:
            contour = ad.broadcast_to(ad.reshape(contour_vectors[j], (-1, 1, 1)), up.shape)
        else:
            contour = Tensor(np.zeros(up.shape))
        feat = model.dec[j](fuse_inputs(StageBundle(up, skip, contour)))

    probs = ad.sigmoid(model.head(feat))
    return ForwardOutput(probs, bank_a, bank_b, contour_vectors, kl, degenerate)


# ----------------------------------------------------------------------------
# parameter bookkeeping
# ----------------------------------------------------------------------------

class CensusEntry(NamedTuple):
    name: str
    shape: tuple[int, ...]
    count: int


def name_parameters(model: Module) -> None:
    seen: dict[int, str] = {}
    for name, p in model.named_parameters():
        if id(p) in seen:
            raise IntegrityError(f"parameter registered twice: {seen[id(p)]} and {name}")
        seen[id(p)] = name
        p.name = name


def parameter_census(model: Module) -> list[CensusEntry]:
    entries = []
    names: set[str] = set()
    ids: set[int] = set()
    for _, p in model.named_parameters():
        if p.name in names or id(p) in ids:
            raise IntegrityError(f"duplicate parameter {p.name!r}")
        names.add(p.name)
        ids.add(id(p))
        entries.append(CensusEntry(p.name, tuple(p.shape), int(p.size)))
    return entries


def census_total(entries: list[CensusEntry]) -> int:
    return sum(e.count for e in entries)


def state_dict(model: Module) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


def load_state_dict(model: Module, state: dict[str, np.ndarray]) -> None:
    params = {p.name: p for p in model.parameters()}
    if set(params) != set(state):
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        raise IntegrityError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
    for name, value in state.items():
        p = params[name]
        if p.shape != value.shape:
            raise IntegrityError(f"{name}: shape {value.shape} does not match {p.shape}")
        p.data[...] = value
