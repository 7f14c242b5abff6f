"""Command-line entry point: ``rsinet {train,eval,predict,sweep,ablate,synth}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import train as trainer
from .data import write_synth_dataset
from .model import VARIANTS

THREADS_ENV = "RSINET_THREADS"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, help="random seed (u64)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--width-mult", type=float, help="channel width multiplier (1/32 = toy scale)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="dataset manifest JSON (default: synthetic data)")
    p.add_argument("--split", help="manifest split used for training")
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--superpixel-size", type=float)
    p.add_argument("--checkpoint-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsinet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write loss.csv plus checkpoints")
    _common(p)
    _training(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics.json and metrics.txt")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", help="dataset manifest (default: the checkpoint's training data)")
    p.add_argument("--split")

    p = sub.add_parser("predict", help="write an indexed-colour PNG of predicted classes")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)

    p = sub.add_parser("sweep", help="superpixel-size sweep; writes sweep.csv")
    _common(p)
    _training(p)
    p.add_argument("--sizes", type=float, nargs="+", default=list(trainer.DEFAULT_SWEEP_SIZES))

    p = sub.add_parser("ablate", help="train all four variants; writes ablation.csv and ablation.txt")
    _common(p)
    _training(p)
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to repeat over (default: --seed)")

    p = sub.add_parser("synth", help="write a synthetic PNG dataset and manifest.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--out", type=Path, default=Path("synthetic"))
    return parser


_OVERRIDES = {
    "seed": "seed", "variant": "variant", "width_mult": "width_mult", "manifest": "manifest", "split": "split",
    "lr": "lr", "iterations": "iterations", "batch_size": "batch_size", "superpixel_size": "superpixel_size",
    "checkpoint_every": "checkpoint_every",
}


def config_from_args(args: argparse.Namespace) -> trainer.TrainConfig:
    """Defaults (or the resumed checkpoint's config), then the ``--config`` file, then explicit flags."""
    if getattr(args, "config", None):
        config = trainer.TrainConfig.load(args.config)
    elif getattr(args, "resume", None):
        config = trainer.checkpoint_config(args.resume)
    else:
        config = trainer.TrainConfig()
    changes = {field: getattr(args, flag) for flag, field in _OVERRIDES.items()
               if getattr(args, flag, None) is not None}
    if changes.get("manifest") is not None:
        changes["manifest"] = str(Path(changes["manifest"]).resolve())
    return replace(config, **changes)


def run(args: argparse.Namespace) -> int:
    out: Path = args.out
    if args.command == "synth":
        path = write_synth_dataset(out, args.seed, args.samples, args.size, args.classes)
        print(path)
        return 0
    if args.command == "train":
        state = trainer.train(config_from_args(args), out, resume=args.resume)
        print(f"trained {state.iteration} steps; checkpoint {out / trainer.FINAL_CHECKPOINT}")
    elif args.command == "eval":
        report = trainer.evaluate(args.checkpoint, args.manifest, args.split)
        trainer.write_report(report, out)
        print(report.to_table(), end="")
    elif args.command == "predict":
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"{args.image.stem}_pred.png"
        trainer.predict(args.checkpoint, args.image, target)
        print(target)
    elif args.command == "sweep":
        trainer.sweep_superpixels(config_from_args(args), out, args.sizes)
        print((out / "sweep.csv").read_text(), end="")
    elif args.command == "ablate":
        config = config_from_args(args)
        results = trainer.ablate(config, out, args.seeds or [config.seed])
        print((out / "ablation.txt").read_text(), end="")
        wins = trainer.full_dominates(results)
        print(f"full >= every ablation (OA) in {sum(wins.values())} of {len(wins)} seeds")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get(THREADS_ENV)
    limit = threadpool_limits(limits=int(threads)) if threads else nullcontext()
    try:
        with limit:
            return run(args)
    except (ValueError, FileNotFoundError, trainer.TrainingDiverged) as exc:
        print(f"rsinet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
