"""SGD training loop with cosine-annealed learning rate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .data import Sample
from .errors import ConfigError, ContractError, NumericalError
from .losses import LossBreakdown, iou_dice_metrics, threshold, total_loss
from .network import CpUnet, forward, state_dict

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    eval_every: int = 50
    max_steps: int = 0
    val_fraction: float = 0.2

    def validate(self) -> None:
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")


REFERENCE_TRAIN_CONFIG = TrainConfig(batch_size=64, epochs=200)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params: Iterable[Parameter], lr: float, cfg: TrainConfig) -> None:
    """Momentum SGD with L2 weight decay folded into the gradient; zeroes grads."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {p.name or p!r}")
    for p in params:
        g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        p.momentum_buffer *= cfg.momentum
        p.momentum_buffer += g
        p.data -= lr * p.momentum_buffer
        p.grad[...] = 0.0


def split_dataset(samples: Sequence[Sample], seed: int, val_fraction: float = 0.2):
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(samples))
    n_val = int(round(val_fraction * len(samples)))
    n_val = min(n_val, max(len(samples) - 1, 0))
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    return train, val


@dataclass
class EvalResult:
    iou: float
    dice: float
    per_image: list[tuple[float, float]]


def evaluate(model: CpUnet, samples: Sequence[Sample],
             predictor: Callable[[np.ndarray], np.ndarray] | None = None) -> EvalResult:
    """Mean IoU/Dice of thresholded predictions.

    The contour branch runs without a target and with ``z = 0``.  A custom
    ``predictor(image) -> binary mask`` can replace the model.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    rows = []
    for s in samples:
        if predictor is None:
            pred = threshold(forward(s.image, model).probs)[0]
        else:
            pred = np.asarray(predictor(s.image), dtype=bool)
        rows.append(iou_dice_metrics(pred, s.mask))
    ious, dices = zip(*rows)
    return EvalResult(float(np.mean(ious)), float(np.mean(dices)), rows)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: LossBreakdown

    def line(self) -> str:
        b = self.loss
        return "\t".join([str(self.step)] + [f"{v:.17g}" for v in (self.lr, b.bce, b.dice, b.kl, b.total)])


@dataclass
class EvalRecord:
    step: int
    iou: float
    dice: float

    def line(self) -> str:
        return f"eval\t{self.step}\t{self.iou:.17g}\t{self.dice:.17g}"


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    best_dice: float = -1.0
    best_step: int = -1
    best_state: dict | None = None
    train_metrics: EvalResult | None = None
    val_metrics: EvalResult | None = None

    def lines(self) -> list[str]:
        return [r.line() for r in self.steps] + [e.line() for e in self.evals]


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    bce = float(np.mean([p.bce for p in parts]))
    dice = float(np.mean([p.dice for p in parts]))
    kl = float(np.mean([p.kl for p in parts]))
    return LossBreakdown(bce, dice, kl, bce + dice + kl)


def train(model: CpUnet, dataset: Sequence[Sample], cfg: TrainConfig,
          log_stream: TextIO | None = None, start_step: int = 0) -> TrainLog:
    """Train in place and return the log.

    Steps are numbered from ``start_step + 1``.  The best-validation-Dice
    parameters are kept in ``log.best_state``.
    """
    cfg.validate()
    train_set, val_set = split_dataset(dataset, cfg.seed, cfg.val_fraction)
    if not train_set:
        raise ValueError("no samples to train on")
    per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = cfg.max_steps or per_epoch * cfg.epochs
    params = model.parameters()
    order_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    log = TrainLog()

    def emit(line: str):
        if log_stream is not None:
            log_stream.write(line + "\n")
            log_stream.flush()

    def run_eval(step: int):
        if not val_set:
            return
        res = evaluate(model, val_set)
        rec = EvalRecord(step, res.iou, res.dice)
        log.evals.append(rec)
        log.val_metrics = res
        emit(rec.line())
        logger.info("step %d: val iou %.4f dice %.4f", step, res.iou, res.dice)
        if res.dice > log.best_dice:
            log.best_dice, log.best_step = res.dice, step
            log.best_state = state_dict(model)

    batches = _batches(len(train_set), cfg.batch_size, order_rng)
    for i in range(total):
        step = start_step + i + 1
        lr = cosine_lr(i, total, cfg.lr0)
        batch = next(batches)
        parts = []
        for idx in batch:
            s = train_set[idx]
            out = forward(s.image, model, mask=s.mask, rng=noise_rng)
            loss, breakdown = total_loss(out.probs, s.mask, out.kl)
            ad.scale(loss, 1.0 / len(batch)).backward()
            parts.append(breakdown)
        sgd_step(params, lr, cfg)
        rec = StepRecord(step, lr, _mean_breakdown(parts))
        log.steps.append(rec)
        emit(rec.line())
        if cfg.eval_every and (i + 1) % cfg.eval_every == 0 and i + 1 != total:
            run_eval(step)
    run_eval(start_step + total)
    if log.best_state is None:
        log.best_state = state_dict(model)
        log.best_step = start_step + total
    log.train_metrics = evaluate(model, train_set)
    return log


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless epochs of shuffled batches; indices inside a batch are sorted."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield sorted(order[start:start + batch_size].tolist())
