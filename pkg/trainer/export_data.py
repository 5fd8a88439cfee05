#!/usr/bin/env python3
"""Export a dataset into the engine's canonical bundle format.

    export_data.py --dataset cora --data-root RAW_DIR --out DIR
    export_data.py --dataset synth-cora --out DIR [--seed S]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from bundle_io import write_bundle
from datasets import obtain


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--dataset", required=True,
                   help="cora | citeseer | pubmed | synth-cora | synth:N,K,D")
    p.add_argument("--data-root", default=None,
                   help="directory with the raw Planetoid files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    try:
        data = obtain(args.dataset, data_root=args.data_root, seed=args.seed)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    out = write_bundle(args.out, data["edges"], data["features"], data["labels"],
                       data["masks"], data["num_classes"])
    n, d = data["features"].shape
    print(f"wrote {out}: N={n} d0={d} K={data['num_classes']} "
          f"E={len(data['edges'])} train={int(data['masks']['train'].sum())}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
