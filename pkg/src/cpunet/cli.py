"""Command-line entry point: ``cpunet synth|train|eval|predict|gradcheck``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, load_config
from .cpm import contour_pixels
from .data import generate_dataset
from .dataset_io import ensure_dir, read_dataset, write_dataset
from .errors import ConfigError, CpUnetError, DataError, IntegrityError, NumericalError
from .gradcheck import run_gradcheck
from .losses import threshold
from .network import CpUnet, CpUnetConfig, forward, load_state_dict
from .pgm import from_uint8, read_pgm, to_uint8, write_pgm
from .train import evaluate, train

logger = logging.getLogger("cpunet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _check_sizes(samples, model_cfg: CpUnetConfig, where: str) -> None:
    for i, s in enumerate(samples):
        if s.image.shape != model_cfg.input_size:
            raise ConfigError(
                f"{where}: sample {i} is {s.image.shape[0]}x{s.image.shape[1]} but the model "
                f"expects {model_cfg.input_size[0]}x{model_cfg.input_size[1]}")


def _load_samples(cfg: RunConfig):
    samples = read_dataset(cfg.paths.data_dir)
    if not samples:
        raise DataError(f"{cfg.paths.data_dir}: no samples")
    return samples


def cmd_synth(cfg: RunConfig) -> Path:
    samples = generate_dataset(cfg.synth, cfg.paths.synth_seed)
    out = write_dataset(ensure_dir(cfg.paths.data_dir), samples, cfg.paths.synth_seed, cfg.synth)
    print(f"wrote {len(samples)} samples to {out}")
    return out


def cmd_train(cfg: RunConfig):
    cfg.train.validate()
    samples = _load_samples(cfg)
    out_dir = ensure_dir(cfg.paths.out_dir)
    start = 0
    if cfg.paths.checkpoint:
        model, start = checkpoint.load(cfg.paths.checkpoint)
        logger.info("resuming from %s at step %d", cfg.paths.checkpoint, start)
    else:
        model = CpUnet(cfg.model)
    _check_sizes(samples, model.config, cfg.paths.data_dir)
    with open(out_dir / "train.log", "w") as fh:
        log = train(model, samples, cfg.train, log_stream=fh, start_step=start)
    last = log.steps[-1].step
    checkpoint.save(out_dir / "model.ckpt", model, last)
    checkpoint.save_state(out_dir / "best.ckpt", model, log.best_state, log.best_step)
    print(f"trained to step {last}; train iou {log.train_metrics.iou:.4f} dice {log.train_metrics.dice:.4f}")
    if log.val_metrics is not None:
        print(f"best val dice {log.best_dice:.4f} at step {log.best_step}")
    return log


def cmd_eval(cfg: RunConfig, ckpt_path: str | None = None, predictor=None):
    ckpt_path = ckpt_path or cfg.paths.checkpoint
    if predictor is None and not ckpt_path:
        raise ConfigError("eval needs a checkpoint (--checkpoint or paths.checkpoint)")
    samples = read_dataset(cfg.paths.data_dir)
    if not samples:
        raise DataError(f"{cfg.paths.data_dir}: no samples")
    model = None
    if predictor is None:
        model, _ = checkpoint.load(ckpt_path)
        _check_sizes(samples, model.config, cfg.paths.data_dir)
    result = evaluate(model, samples, predictor=predictor)
    rows = [f"{i}\t{iou:.6f}\t{dice:.6f}" for i, (iou, dice) in enumerate(result.per_image)]
    rows.append(f"mean\t{result.iou:.6f}\t{result.dice:.6f}")
    out_dir = ensure_dir(cfg.paths.out_dir)
    (out_dir / "metrics.tsv").write_text("index\tiou\tdice\n" + "\n".join(rows) + "\n")
    print("\n".join(rows))
    return result


def predict_image(model: CpUnet, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask and overlay (predicted contour pixels set to 255) as uint8 arrays."""
    mask = threshold(forward(image, model).probs)[0]
    overlay = to_uint8(image)
    overlay[contour_pixels(mask)] = 255
    return np.where(mask, 255, 0).astype(np.uint8), overlay


def cmd_predict(cfg: RunConfig, image_path: str, ckpt_path: str | None = None):
    ckpt_path = ckpt_path or cfg.paths.checkpoint
    if not ckpt_path:
        raise ConfigError("predict needs a checkpoint (--checkpoint or paths.checkpoint)")
    model, _ = checkpoint.load(ckpt_path)
    pixels = read_pgm(image_path)
    h, w = pixels.shape
    n = 2 ** model.config.stages
    if h % n or w % n:
        raise ConfigError(
            f"image {image_path} is {h}x{w}, not divisible by {n}; resize or crop it to "
            f"{model.config.input_size[0]}x{model.config.input_size[1]}")
    if (h, w) != model.config.input_size:
        raise ConfigError(
            f"image {image_path} is {h}x{w} but the model expects "
            f"{model.config.input_size[0]}x{model.config.input_size[1]}; resize it first")
    image = from_uint8(pixels) if pixels.dtype == np.uint8 else pixels / 65535.0
    mask, overlay = predict_image(model, image)
    out_dir = ensure_dir(cfg.paths.out_dir)
    stem = Path(image_path).stem
    write_pgm(out_dir / f"{stem}_mask.pgm", mask)
    write_pgm(out_dir / f"{stem}_overlay.pgm", overlay)
    print(f"wrote {out_dir / f'{stem}_mask.pgm'} ({int((mask > 0).sum())} foreground pixels)")
    return mask, overlay


def gradcheck_defaults() -> RunConfig:
    cfg = RunConfig()
    cfg.model = CpUnetConfig(stages=2, input_size=(16, 16), base_channels=8, contour_dim=4,
                             extractor_width=8, band=1)
    return cfg


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = run_gradcheck(cfg.model, seed=cfg.model.seed)
    for r in results:
        print(r.line())
    failed = [r.block for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} blocks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with [model]/[train]/[synth]/[paths]")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. model.stages=2 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("synth", parents=[common], help="write a synthetic PGM dataset")
    sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    p_eval = sub.add_parser("eval", parents=[common], help="report IoU/Dice of a checkpoint")
    p_eval.add_argument("--checkpoint")
    p_pred = sub.add_parser("predict", parents=[common], help="write mask and overlay PGMs")
    p_pred.add_argument("--checkpoint")
    p_pred.add_argument("--image", required=True)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check every block")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = gradcheck_defaults() if args.command == "gradcheck" else None
        cfg = load_config(args.config, args.set, base=base)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "predict":
            cmd_predict(cfg, args.image, args.checkpoint)
        else:
            return cmd_gradcheck(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IntegrityError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CpUnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
