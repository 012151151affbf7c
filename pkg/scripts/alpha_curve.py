"""Train a TaskNorm model with variable context sizes and summarize its learned alpha curve.

    python3 scripts/alpha_curve.py scripts/configs/variable_shot.yaml --out runs/variable-shot
"""

import argparse
import csv
import logging
from collections import defaultdict
from pathlib import Path

from metanorm import bench
from metanorm.config import load_config


def summarize(run_dir, small: int = 1, large: int = 25) -> dict:
    """Per layer: (scale, offset, alpha at ``small``, alpha at ``large``)."""
    rows = defaultdict(dict)
    with open(Path(run_dir) / "alpha_curve.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            rows[r["layer"]][int(r["context_size"])] = r
    return {layer: (float(by[small]["scale"]), float(by[small]["offset"]),
                    float(by[small]["alpha"]), float(by[large]["alpha"]))
            for layer, by in rows.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", default="runs/variable-shot")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    (run,) = bench.sweep(cfg, [cfg.norm_scheme.kind], [cfg.schedule.seed], args.out)
    print("layer,scale,offset,alpha_1,alpha_25")
    for layer, (s, o, a1, a25) in summarize(run).items():
        print(f"{layer},{s:.4f},{o:.4f},{a1:.4f},{a25:.4f}")


if __name__ == "__main__":
    main()
