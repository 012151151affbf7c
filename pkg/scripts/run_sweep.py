"""Train one run per (scheme, seed) from a template config and write the comparison table.

    python3 scripts/run_sweep.py scripts/configs/protonets_1shot.yaml \
        --schemes TBN,MetaBN,TaskNormI --seeds 0,1,2 --out runs/protonets
"""

import argparse
import logging
from pathlib import Path

from metanorm import bench
from metanorm.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--schemes", required=True, help="comma-separated normalization kinds")
    ap.add_argument("--seeds", default="0", help="comma-separated training seeds")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    template = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    runs = bench.sweep(template, args.schemes.split(","), seeds, args.out,
                       progress=lambda row: logging.info("%s", row) if row["val_accuracy"] == row["val_accuracy"] else None)
    table, _ = bench.emit_comparison(runs, Path(args.out))
    print(table.read_text())


if __name__ == "__main__":
    main()
