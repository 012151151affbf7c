"""Experiment runner, result tables, ranking and the transductivity audit."""

from __future__ import annotations

import csv
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import yaml
from scipy.stats import rankdata

from .backbone import Backbone, BackboneConfig, load_params, save_params
from .config import ExperimentConfig, config_from_dict
from .data import ClassPool, Episode, TaskSpec, load_image_dataset, make_synthetic_splits, sample_episode
from .learners import (MAMLConfig, MAMLLearner, MetaLearner, ProtoNetLearner, TrainSchedule,
                       episodic_meta_train, evaluate_modes)
from .norm import alpha_curve

log = logging.getLogger(__name__)

ARTIFACTS = ("training_curve.csv", "results.csv", "alpha_curve.csv", "params.bin", "manifest.yaml")
PARTIAL_MARKER = "PARTIAL"
ALPHA_SIZES = range(1, 101)


def ci95(accuracies: Sequence[float]) -> float:
    """1.96 * stddev / sqrt(n) over per-episode accuracies (population stddev)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        return math.nan
    return float(1.96 * acc.std() / math.sqrt(acc.size))


# building blocks -------------------------------------------------------------------

def build_pools(cfg: ExperimentConfig) -> dict[str, ClassPool]:
    d = cfg.dataset
    if d.kind == "synthetic":
        return make_synthetic_splits(d.seed, d.train_classes, d.val_classes, d.test_classes,
                                     d.examples_per_class, d.image_size, d.stat_shift)
    return {split: load_image_dataset(d.root, split, d.image_size) for split in ("meta_train", "meta_validation", "meta_test")}


def task_spec(cfg: ExperimentConfig) -> TaskSpec:
    d = cfg.dataset
    return TaskSpec(d.way, d.shot, d.targets_per_class, tuple(d.variable_shot) if d.variable_shot else None)


def build_learner(cfg: ExperimentConfig, in_channels: int = 1, seed: Optional[int] = None) -> MetaLearner:
    bcfg = BackboneConfig(in_channels, cfg.dataset.image_size, cfg.backbone.blocks, cfg.backbone.channels, cfg.backbone.kernel)
    seed = cfg.schedule.seed if seed is None else seed
    ml = cfg.meta_learner
    if ml.kind == "maml":
        bb = Backbone(bcfg, cfg.norm_scheme, head_width=cfg.dataset.way, seed=seed)
        return MAMLLearner(bb, MAMLConfig(ml.inner_lr, ml.inner_steps_train, ml.inner_steps_eval, True, cfg.schedule.outer_lr))
    return ProtoNetLearner(Backbone(bcfg, cfg.norm_scheme, seed=seed), ml.distance)


def fixed_episodes(pool: ClassPool, spec: TaskSpec, n: int, seed: int) -> list[Episode]:
    rng = np.random.default_rng(seed)
    return [sample_episode(pool, spec, rng) for _ in range(n)]


def test_episodes(cfg: ExperimentConfig, pools: Mapping[str, ClassPool], n: Optional[int] = None) -> list[Episode]:
    return fixed_episodes(pools["meta_test"], task_spec(cfg), cfg.evaluation.episodes if n is None else n, cfg.evaluation.seed)


def evaluate(learner: MetaLearner, episodes: Sequence[Episode], modes: Iterable[str]) -> dict[str, list]:
    """Per-mode lists of per-episode accuracies."""
    modes = list(modes)
    out = {m: [] for m in modes}
    for ep in episodes:
        for m, (acc, _) in evaluate_modes(learner, ep, modes).items():
            out[m].append(acc)
    return out


# the audit -------------------------------------------------------------------------

@dataclass
class AuditReport:
    scheme: str
    episodes: int
    mismatched_episodes: int
    mismatched_predictions: int
    accuracy: dict
    certified_non_transductive: bool
    per_episode_equal: list = field(default_factory=list, repr=False)


def transductivity_audit(learner: MetaLearner, episodes: Sequence[Episode]) -> AuditReport:
    """Compare predictions across all / per-example / per-class target feeding."""
    equal_flags = []
    differing = 0
    accs = {"all": [], "per_example": [], "per_class": []}
    for ep in episodes:
        res = evaluate_modes(learner, ep, accs)
        base = res["all"][1]
        same = all(np.array_equal(base, res[m][1]) for m in ("per_example", "per_class"))
        differing += int(sum(np.count_nonzero(base != res[m][1]) for m in ("per_example", "per_class")))
        equal_flags.append(same)
        for m in accs:
            accs[m].append(res[m][0])
    mismatched = len(equal_flags) - sum(equal_flags)
    return AuditReport(learner.backbone.scheme.kind, len(episodes), mismatched, differing,
                       {m: float(np.mean(v)) if v else math.nan for m, v in accs.items()}, mismatched == 0, equal_flags)


# ranking and tables -----------------------------------------------------------------------

@dataclass
class ResultsTable:
    """Rows are schemes, columns are config cells; cells hold (mean %, ci95 %, episodes)."""

    cells: dict = field(default_factory=dict)

    def set(self, scheme: str, column: str, mean: float, ci: float, episodes: int) -> None:
        self.cells.setdefault(scheme, {})[column] = (mean, ci, episodes)

    @property
    def schemes(self) -> list[str]:
        return list(self.cells)

    @property
    def columns(self) -> list[str]:
        return sorted({c for row in self.cells.values() for c in row})


def average_rank(table: ResultsTable) -> dict[str, float]:
    """Mean per-column rank (1 = best accuracy; ties share the mean position)."""
    schemes = table.schemes
    ranks = {s: [] for s in schemes}
    for col in table.columns:
        present = [s for s in schemes if col in table.cells[s]]
        r = rankdata([-table.cells[s][col][0] for s in present], method="average")
        for s, v in zip(present, r):
            ranks[s].append(float(v))
    return {s: float(np.mean(v)) if v else math.nan for s, v in ranks.items()}


def write_table(table: ResultsTable, path) -> None:
    ranks = average_rank(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "config", "accuracy", "ci95", "episodes"])
        for s in table.schemes:
            for c in table.columns:
                if c in table.cells[s]:
                    mean, ci, n = table.cells[s][c]
                    w.writerow([s, c, f"{mean:.4f}", f"{ci:.4f}", n])
        for s in table.schemes:
            w.writerow([s, "average_rank", f"{ranks[s]:.4f}", "", ""])


def read_table(path) -> ResultsTable:
    """Load a results/comparison CSV (rows with mode other than ``all`` are skipped)."""
    table = ResultsTable()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("config") == "average_rank" or row.get("mode", "all") != "all":
                continue
            table.set(row["scheme"], row["config"], float(row["accuracy"]), float(row["ci95"] or "nan"), int(row["episodes"] or 0))
    return table


# run directories -----------------------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_alpha_curve(learner: MetaLearner, path) -> None:
    bb = learner.backbone
    rows = []
    for layer in bb.norms:
        if layer.scheme.has_blend_params:
            scale = bb.params[f"{layer.name}.scale"]
            offset = bb.params[f"{layer.name}.offset"]
            alphas = alpha_curve(layer.scheme.blend_mode, scale, offset, ALPHA_SIZES).mean(axis=1)
            s, o = float(scale.mean()), float(offset.mean())
        elif layer.scheme.kind == "RN":
            alphas = np.array([n / (1.0 + n) for n in ALPHA_SIZES])
            s, o = math.nan, math.nan
        else:
            continue
        rows += [[layer.name, n, repr(float(a)), _fmt(s), _fmt(o)] for n, a in zip(ALPHA_SIZES, alphas)]
    _write_csv(path, ["layer", "context_size", "alpha", "scale", "offset"], rows)


def choose_snapshot(rule: str, final_val: float, best_val: float) -> str:
    """``final`` or ``best_validation`` under a snapshot rule (ties keep the final one)."""
    if rule == "final" or math.isnan(final_val):
        return "final"
    if rule == "best_validation":
        return "best_validation"
    return "best_validation" if best_val > final_val else "final"


def run_experiment(cfg: ExperimentConfig, out_dir, progress=None) -> Path:
    """Train, evaluate and write every run artifact into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL_MARKER
    marker.write_text("run started\n")
    try:
        _run(cfg, out, progress)
    except Exception:
        marker.write_text(traceback.format_exc())
        raise
    marker.unlink()
    return out


def _run(cfg: ExperimentConfig, out: Path, progress) -> None:
    pools = build_pools(cfg)
    spec = task_spec(cfg)
    learner = build_learner(cfg, in_channels=pools["meta_train"].image_shape[0])
    rng = np.random.default_rng(cfg.schedule.seed)
    val = fixed_episodes(pools["meta_validation"], spec, cfg.schedule.val_episodes, cfg.schedule.seed + 1)
    sched = TrainSchedule(cfg.schedule.iterations, cfg.schedule.outer_lr, cfg.schedule.optimizer,
                          cfg.schedule.momentum, cfg.schedule.meta_batch, cfg.schedule.val_every, cfg.schedule.val_episodes)
    result = episodic_meta_train(learner, lambda: sample_episode(pools["meta_train"], spec, rng), sched, val, progress)
    _write_csv(out / "training_curve.csv", ["iteration", "train_loss", "val_accuracy"],
               [[r["iteration"], repr(r["train_loss"]), _fmt(r["val_accuracy"])] for r in result.rows])

    # report the better of the final and best-validation snapshots
    bb = learner.backbone
    save_params(out / "params_final.bin", result.final)
    save_params(out / "params_best.bin", result.best)
    final_val = result.rows[-1]["val_accuracy"] if val else math.nan
    chosen = choose_snapshot(cfg.schedule.snapshot, final_val, result.best_val_accuracy)
    if chosen == "best_validation":
        bb.load_snapshot(result.best)
    log.info("reporting the %s snapshot (final val %.4f, best val %.4f at iteration %d)",
             chosen, final_val, result.best_val_accuracy, result.best_iteration)
    save_params(out / "params.bin", bb.snapshot())
    write_alpha_curve(learner, out / "alpha_curve.csv")

    episodes = test_episodes(cfg, pools)
    accs = evaluate(learner, episodes, cfg.evaluation.modes)
    _write_results(out / "results.csv", cfg, accs)
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.schedule.seed,
        "snapshot": {"rule": cfg.schedule.snapshot, "reported": chosen, "final_val_accuracy": final_val,
                     "best_val_accuracy": result.best_val_accuracy, "best_iteration": result.best_iteration},
        "protocol": protocol(cfg),
    }
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))


def protocol(cfg: ExperimentConfig) -> dict:
    e = cfg.evaluation
    return {"episodes": e.episodes, "modes": list(e.modes), "eval_seed": e.seed}


def _write_results(path, cfg: ExperimentConfig, accs: Mapping[str, list]) -> None:
    rows = []
    for mode, values in accs.items():
        rows.append([cfg.norm_scheme.kind, cfg.dataset.cell, cfg.meta_learner.kind, mode,
                     repr(100.0 * float(np.mean(values))), repr(100.0 * ci95(values)), len(values)])
    _write_csv(path, ["scheme", "config", "learner", "mode", "accuracy", "ci95", "episodes"], rows)


def load_run(run_dir) -> tuple[ExperimentConfig, MetaLearner, dict]:
    """Rebuild the learner of a finished run with its reported snapshot."""
    run = Path(run_dir)
    manifest = yaml.safe_load((run / "manifest.yaml").read_text())
    cfg = config_from_dict(manifest["config"])
    pools = build_pools(cfg)
    learner = build_learner(cfg, in_channels=pools["meta_train"].image_shape[0])
    learner.backbone.load_snapshot(load_params(run / "params.bin"))
    return cfg, learner, pools


AUDIT_COLUMNS = ("scheme", "episodes", "mismatched_episodes", "mismatched_predictions",
                 "acc_all", "acc_per_example", "acc_per_class", "non_transductive")


def audit_run(run_dir, episodes: Optional[int] = None) -> AuditReport:
    """Audit a finished run on meta-test episodes disjoint in seed from its evaluation set."""
    cfg, learner, pools = load_run(run_dir)
    n = episodes or cfg.evaluation.audit_episodes
    eps = fixed_episodes(pools["meta_test"], task_spec(cfg), n, cfg.evaluation.seed + 1)
    return transductivity_audit(learner, eps)


def write_audit(reports: Sequence[AuditReport], path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AUDIT_COLUMNS)
        for r in reports:
            a = r.accuracy
            w.writerow([r.scheme, r.episodes, r.mismatched_episodes, r.mismatched_predictions,
                        f"{a['all']:.6f}", f"{a['per_example']:.6f}", f"{a['per_class']:.6f}",
                        r.certified_non_transductive])
    return Path(path)


def emit_comparison(run_dirs: Sequence, out_dir) -> tuple[Path, Path]:
    """Merge runs into ``comparison.csv`` (with average ranks) and ``curves.csv``."""
    if not run_dirs:
        raise ValueError("need at least one run directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = ResultsTable()
    curve_rows = []
    reference = None
    for rd in run_dirs:
        rd = Path(rd)
        manifest = yaml.safe_load((rd / "manifest.yaml").read_text())
        proto = manifest["protocol"]
        if reference is None:
            reference = proto
        elif proto != reference:
            raise ValueError(f"{rd}: evaluation protocol {proto} differs from {reference}")
        scheme = manifest["config"]["norm_scheme"]["kind"]
        for col, (mean, ci, n) in read_table(rd / "results.csv").cells.get(scheme, {}).items():
            table.set(scheme, col, mean, ci, n)
        with open(rd / "training_curve.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                curve_rows.append([scheme, manifest["config"]["name"], row["iteration"], row["train_loss"], row["val_accuracy"]])
    table_path = out / "comparison.csv"
    write_table(table, table_path)
    curves_path = out / "curves.csv"
    _write_csv(curves_path, ["scheme", "run", "iteration", "loss", "val_accuracy"], curve_rows)
    return table_path, curves_path


def sweep(template: ExperimentConfig, schemes: Sequence[str], seeds: Sequence[int], out_root,
          progress=None) -> list[Path]:
    """One run per (scheme, seed) under ``out_root/<scheme>-s<seed>``; finished runs are reused."""
    runs = []
    for seed in seeds:
        for kind in schemes:
            raw = template.to_dict()
            raw["norm_scheme"]["kind"] = kind
            raw["schedule"]["seed"] = int(seed)
            raw["name"] = f"{template.name}-{kind}-s{seed}"
            cfg = config_from_dict(raw)
            out = Path(out_root) / f"{kind}-s{seed}"
            if not _finished_with(out, cfg):
                log.info("running %s", raw["name"])
                run_experiment(cfg, out, progress)
            runs.append(out)
    return runs


def _finished_with(run_dir: Path, cfg: ExperimentConfig) -> bool:
    manifest = run_dir / "manifest.yaml"
    if not manifest.exists() or (run_dir / PARTIAL_MARKER).exists():
        return False
    return yaml.safe_load(manifest.read_text())["config"] == cfg.to_dict()


def read_results(run_dir, mode: str = "all") -> tuple[float, float, int]:
    """(accuracy %, ci95 %, episodes) of one run and mode."""
    with open(Path(run_dir) / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        if row["mode"] == mode:
            return float(row["accuracy"]), float(row["ci95"]), int(row["episodes"])
    raise KeyError(f"{run_dir}: no results for mode {mode!r}")
