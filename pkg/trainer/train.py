#!/usr/bin/env python3
"""Train one specialist parent and export the engine-format checkpoint.

    train.py --arch gcn --depth 2 --width 64 --bundle DIR \
             --split split.json --side A --seed 0 --out DIR
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from bundle_io import load_split_masks, read_bundle
from training import train_parent


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--arch", required=True, choices=["gcn", "gat", "sage", "gin"])
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--side", required=True, choices=["A", "B"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--verbose", action="store_true")
    args = p.parse_args(argv)

    bundle = read_bundle(args.bundle)
    masks = load_split_masks(args.split, bundle["num_nodes"])
    train_mask = masks["a_train"] if args.side == "A" else masks["b_train"]
    dims = [bundle["features"].shape[1]] + [args.width] * (args.depth - 1) \
        + [bundle["num_classes"]]
    model, stats = train_parent(
        args.arch, dims, bundle, train_mask, seed=args.seed,
        lr=args.lr, max_epochs=args.max_epochs, patience=args.patience,
        verbose=args.verbose,
    )
    config = {
        "arch": args.arch, "depth": args.depth, "width": args.width,
        "side": args.side, "seed": args.seed,
        "lr": args.lr, "patience": args.patience,
        "dropout": model.dropout,
        "stats": stats,
    }
    out = model.export(args.out, config=config)
    (Path(out) / "train_stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(f"trained {args.arch} d{args.depth} w{args.width} side {args.side}: "
          f"train_acc={stats['train_acc']:.3f} val_acc={stats['val_acc']:.3f} "
          f"-> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
