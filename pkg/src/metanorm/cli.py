"""``metanorm`` command line: train, eval, audit, compare, rank."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import ConfigError, load_config
from .learners import canonical_mode

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("metanorm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # a malformed invocation counts as a configuration error
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _modes(text: str) -> list[str]:
    try:
        return [canonical_mode(m.strip()) for m in text.split(",") if m.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    every = max(1, cfg.schedule.iterations // 20)

    def progress(row):
        if row["iteration"] % every == 0 or row["val_accuracy"] == row["val_accuracy"]:
            log.info("iteration %d  loss %.4f  val %s", row["iteration"], row["train_loss"], row["val_accuracy"])

    bench.run_experiment(cfg, out, progress)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, learner, pools = bench.load_run(args.run_dir)
    modes = _modes(args.modes) if args.modes else cfg.evaluation.modes
    episodes = bench.test_episodes(cfg, pools, args.episodes)
    accs = bench.evaluate(learner, episodes, modes)
    path = Path(args.run_dir) / "eval.csv"
    bench._write_results(path, cfg, accs)
    for m, v in accs.items():
        print(f"{m:12s} {100 * np.mean(v):6.2f} +/- {100 * bench.ci95(v):.2f}  ({len(v)} episodes)")
    return EXIT_OK


def cmd_audit(args) -> int:
    report = bench.audit_run(args.run_dir, args.episodes)
    bench.write_audit([report], Path(args.run_dir) / "audit.csv")
    verdict = "non-transductive" if report.certified_non_transductive else "TRANSDUCTIVE"
    print(f"{report.scheme}: {verdict} ({report.mismatched_episodes}/{report.episodes} episodes differ)")
    return EXIT_OK


def cmd_compare(args) -> int:
    table, curves = bench.emit_comparison(args.run_dirs, args.out)
    print(table)
    print(curves)
    return EXIT_OK


def cmd_rank(args) -> int:
    table = bench.read_table(args.results)
    for scheme, r in sorted(bench.average_rank(table).items(), key=lambda kv: kv[1]):
        print(f"{scheme:12s} {r:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metanorm", description="Normalization schemes for meta-learning at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train and evaluate one config")
    t.add_argument("config")
    t.add_argument("--out", help="run directory (default runs/<name>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a finished run")
    e.add_argument("run_dir")
    e.add_argument("--modes", help="comma list of all, example, class")
    e.add_argument("--episodes", type=int)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="transductivity audit of a finished run")
    a.add_argument("run_dir")
    a.add_argument("--episodes", type=int)
    a.set_defaults(func=cmd_audit)

    c = sub.add_parser("compare", help="merge runs into comparison.csv and curves.csv")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("rank", help="average ranks from a results or comparison CSV")
    r.add_argument("results")
    r.set_defaults(func=cmd_rank)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure maps to the runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
