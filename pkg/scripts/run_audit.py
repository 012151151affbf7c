"""Train a short ProtoNets model per scheme and audit its predictions across feeding modes.

    python3 scripts/run_audit.py scripts/configs/audit.yaml --out runs/audit
"""

import argparse
import logging
from pathlib import Path

from metanorm import bench
from metanorm.config import load_config
from metanorm.norm import KINDS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--schemes", default=",".join(KINDS))
    ap.add_argument("--out", default="runs/audit")
    ap.add_argument("--episodes", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    template = load_config(args.config)
    runs = bench.sweep(template, args.schemes.split(","), [template.schedule.seed], args.out)
    reports = [bench.audit_run(run, args.episodes) for run in runs]
    path = bench.write_audit(reports, Path(args.out) / "audit_summary.csv")
    print(path.read_text())


if __name__ == "__main__":
    main()
