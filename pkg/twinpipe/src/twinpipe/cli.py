"""Command line: twinpipe train|infer."""

from __future__ import annotations

import argparse
import sys

from .infer import infer_pipe
from .train import TrainSettings, train_pipe


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="twinpipe",
                                     description="Twin-pipe A/V patch classifier")
    sub = parser.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train one pipe on an exported dataset")
    t.add_argument("--pipe", choices=("full", "terminal"), required=True)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="model artifact path")
    t.add_argument("--epochs", type=int, default=150)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("infer", help="emit a probability TSV")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.cmd == "train":
            settings = TrainSettings(momentum=args.momentum, learning_rate=args.lr,
                                     batch_size=args.batch_size, epochs=args.epochs,
                                     seed=args.seed)
            manifest = train_pipe(args.data, args.pipe, args.out, settings)
            print(f"trained {args.pipe} pipe: train acc {manifest['train_accuracy']:.3f} "
                  f"val acc {manifest['val_accuracy']:.3f} "
                  f"({manifest['epochs_run']} epochs)")
        else:
            probs = infer_pipe(args.model, args.data, args.out)
            print(f"wrote {len(probs)} probabilities to {args.out}")
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
