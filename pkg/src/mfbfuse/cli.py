"""Command-line entry point: ``mfbfuse {gen,train,eval,gradcheck,compare}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from mfbfuse.config import ConfigError, RunConfig, load_config
from mfbfuse.data import Dataset, DatasetFormatError, generate_synthetic, read_dataset, write_dataset
from mfbfuse.gradcheck import run_gradchecks
from mfbfuse.model import VideoNet
from mfbfuse.numerics import ShapeError
from mfbfuse.training import (CheckpointError, TrainingDivergedError, evaluate, load_checkpoint,
                              save_checkpoint, train)

COMPARE_VARIANTS = ("audio_only", "video_only", "concat", "fc_concat", "mfb")


class CliError(Exception):
    pass


def _build_model(cfg: RunConfig, data: Dataset, **overrides) -> VideoNet:
    model_cfg = cfg.model_config(data.visual_dim, data.audio_dim, data.num_classes, **overrides)
    return VideoNet(model_cfg, seed=cfg.train.seed)


def _check_same_layout(a: Dataset, b: Dataset) -> None:
    if (a.visual_dim, a.audio_dim, a.num_classes) != (b.visual_dim, b.audio_dim, b.num_classes):
        raise CliError("training and validation datasets have different dimensions")


def cmd_gen(args) -> None:
    cfg = load_config(args.spec)
    data = generate_synthetic(cfg.synth)
    if args.val_out is None:
        write_dataset(args.out, data)
        return
    if cfg.val_videos > len(data):
        raise CliError(f"synth.val_videos={cfg.val_videos} exceeds synth.videos={len(data)}")
    n_train = len(data) - cfg.val_videos
    write_dataset(args.out, data.subset(range(n_train)))
    write_dataset(args.val_out, data.subset(range(n_train, len(data))))


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    data, val = read_dataset(args.data), read_dataset(args.val)
    _check_same_layout(data, val)
    model = _build_model(cfg, data)
    log_path = args.log if args.log is not None else f"{args.out}.log"
    train(model, data, val, cfg.train, log_path=log_path)
    save_checkpoint(args.out, model)


def cmd_eval(args) -> None:
    model = load_checkpoint(args.ckpt)
    gap, loss = evaluate(model, read_dataset(args.data))
    print(f"gap={gap!r} loss={loss!r}")


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(seed=args.seed, perturb=args.perturb)
    for r in results:
        print(f"{r.operator}\t{r.max_rel_error:.3e}\t{'PASS' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 1


def cmd_compare(args) -> None:
    cfg = load_config(args.config)
    data, val = read_dataset(args.data), read_dataset(args.val)
    _check_same_layout(data, val)
    log_dir = Path(args.log_dir) if args.log_dir else None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
    aggregator = cfg.model.get("aggregator", "avg")
    table = []
    for variant in COMPARE_VARIANTS:
        model = _build_model(cfg, data, fusion=variant)
        log_path = log_dir / f"{aggregator}_{variant}.log" if log_dir is not None else None
        train(model, data, val, cfg.train, log_path=log_path)
        table.append((variant, evaluate(model, val)[0]))
    print("variant\tgap")
    for variant, gap in table:
        print(f"{aggregator}+{variant}\t{gap:.6f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfbfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", help="key=value file with synth.* keys (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--val-out", help="also split the last synth.val_videos videos into this file")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log path (default: <out>.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print GAP@20 and loss of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="train the five fusion variants and print a GAP table")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--log-dir")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (CliError, ConfigError, DatasetFormatError, CheckpointError, ShapeError,
            TrainingDivergedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
