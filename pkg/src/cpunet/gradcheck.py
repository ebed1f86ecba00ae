"""Block-by-block finite-difference verification of a small CP-UNet."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import cpm, gf, mgcsd
from .autodiff import Parameter, Tensor, gradient_check
from .data import SynthSpec, generate_sample
from .errors import ConfigError
from .losses import bce_loss, dice_loss, total_loss
from .network import CpUnet, CpUnetConfig, forward

THRESHOLD = 1e-4


class BlockResult(NamedTuple):
    block: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD

    def line(self) -> str:
        return f"{self.block}\t{self.max_rel_error:.3e}\t{'PASS' if self.passed else 'FAIL'}"


def _leaf(rng, shape, scale=1.0, name="input") -> Parameter:
    return Parameter(scale * rng.standard_normal(shape), name=name)


def _probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Random linear functional so every output coordinate contributes."""
    return ad.sum(ad.mul(out, Tensor(weights)))


def run_gradcheck(config: CpUnetConfig, seed: int = 0, eps: float = 1e-5,
                  samples_per_param: int = 4) -> list[BlockResult]:
    """Check every block of ``config``'s model and the end-to-end loss."""
    h, w = config.input_size
    if config.stages > 2 or max(h, w) > 16:
        raise ConfigError(f"gradcheck needs stages <= 2 and size <= 16, got {config.stages} and {h}x{w}")
    model = CpUnet(config)
    rng = np.random.default_rng(seed)
    blocks: list[tuple[str, Callable[[], Tensor], list[Parameter]]] = []

    enc0 = model.enc[0]
    x0 = _leaf(rng, (config.base_channels, h, w), 0.5)
    r0 = rng.standard_normal((config.encoder_channels()[0], h // 2, w // 2))
    blocks.append(("mgcsd" if config.enable_mgcsd else "encoder",
                   lambda: _probe(enc0(x0), r0), [x0, *enc0.parameters()]))

    if config.enable_cpm:
        deep = config.encoder_channels()[-1]
        side = h // 2 ** config.stages
        xd = _leaf(rng, (deep, side, side), 0.5)
        ra, rb = rng.standard_normal((2, config.k, config.contour_dim))
        ext = model.cpm.extractor

        def bank_probe(e, x):
            def f():
                bank = e(x)
                return ad.add(_probe(bank.mu, ra), _probe(bank.sigma, rb))
            return f

        blocks.append(("cpm.extractor", bank_probe(ext, xd), [xd, *ext.parameters()]))
        y = Tensor(rng.uniform(0, 1, (1, h, w)))
        tgt = model.cpm.target_extractor
        blocks.append(("cpm.target_extractor", bank_probe(tgt, y), tgt.parameters()))

        mu = _leaf(rng, (config.k, config.contour_dim), name="mu")
        sig = Parameter(rng.uniform(0.3, 1.5, (config.k, config.contour_dim)), name="sigma")
        omega = model.cpm.omegas[0]

        def reparam():
            bank = cpm.GaussianBank(mu, sig)
            return ad.mean(cpm.reparam_sample(bank, omega, np.random.default_rng(seed)))

        blocks.append(("cpm.reparam", reparam, [mu, sig, omega]))

        mu_b = Tensor(rng.standard_normal(mu.shape))
        sig_b = Tensor(rng.uniform(0.3, 1.5, mu.shape))
        blocks.append(("cpm.kl", lambda: cpm.kl_align(cpm.GaussianBank(mu, sig),
                                                      cpm.GaussianBank(mu_b, sig_b)), [mu, sig]))

    c0 = config.decoder_channels()[0]
    fu, fs, fc = (_leaf(rng, (c0, h, w), 0.5, name=n) for n in ("F_up", "F_skip", "F_contour"))
    rg = rng.standard_normal((c0, h, w))
    dec0 = model.dec[0]
    blocks.append(("gf" if config.enable_gf else "decoder",
                   lambda: _probe(dec0(gf.fuse_inputs(gf.StageBundle(fu, fs, fc))), rg),
                   [fu, fs, fc, *dec0.parameters()]))

    xh = _leaf(rng, (config.base_channels, h, w), 0.5)
    rh = rng.standard_normal((1, h, w))
    blocks.append(("head", lambda: _probe(ad.sigmoid(model.head(xh)), rh), [xh, *model.head.parameters()]))

    sample = generate_sample(SynthSpec(size=(h, w), margin=1, area_range=(0.05, 0.6)),
                             np.random.default_rng(seed))
    pred = Parameter(rng.uniform(0.1, 0.9, (1, h, w)), name="pred")
    blocks.append(("losses", lambda: ad.add(bce_loss(pred, sample.mask), dice_loss(pred, sample.mask)), [pred]))

    def end_to_end():
        out = forward(sample.image, model, mask=sample.mask, rng=np.random.default_rng(seed))
        return total_loss(out.probs, sample.mask, out.kl)[0]

    # with a stop-gradient KL target, theta' gets no gradient from the loss by design
    frozen = set()
    if config.enable_cpm and not config.kl_grad_to_target:
        frozen = {id(p) for p in model.cpm.target_extractor.parameters()}
    blocks.append(("end_to_end", end_to_end, [p for p in model.parameters() if id(p) not in frozen]))

    return [BlockResult(name, gradient_check(f, params, eps, samples_per_param, seed))
            for name, f, params in blocks]
