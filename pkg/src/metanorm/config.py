"""Experiment configuration: YAML sections mapped onto dataclasses.

Every field has a default, so ``{}`` is a valid config. Unknown keys are
rejected with the offending line number.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .norm import NormScheme

SEED_ENV = "METANORM_SEED"
# which trained snapshot gets evaluated and exported
SNAPSHOT_RULES = ("best_of", "final", "best_validation")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: Optional[str] = None
    seed: int = 0
    train_classes: int = 100
    val_classes: int = 20
    test_classes: int = 40
    examples_per_class: int = 20
    image_size: int = 32
    stat_shift: float = 0.0
    way: int = 5
    shot: int = 1
    targets_per_class: int = 5
    variable_shot: Optional[list] = None

    @property
    def cell(self) -> str:
        shot = f"{self.variable_shot[0]}to{self.variable_shot[1]}" if self.variable_shot else str(self.shot)
        return f"{self.kind}-{self.way}-{shot}"


@dataclass
class BackboneSection:
    blocks: int = 4
    channels: int = 32
    kernel: int = 3


@dataclass
class MetaLearnerConfig:
    kind: str = "protonets"
    inner_lr: float = 0.4
    inner_steps_train: int = 1
    inner_steps_eval: int = 10
    distance: str = "euclidean"


@dataclass
class ScheduleConfig:
    iterations: int = 200
    outer_lr: float = 0.001
    optimizer: str = "momentum"
    momentum: float = 0.9
    meta_batch: int = 1
    val_every: int = 50
    val_episodes: int = 50
    seed: int = 0
    snapshot: str = "best_of"


@dataclass
class EvaluationConfig:
    episodes: int = 200
    modes: list = field(default_factory=lambda: ["all", "per_example", "per_class"])
    audit_episodes: int = 100
    seed: int = 12345


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    meta_learner: MetaLearnerConfig = field(default_factory=MetaLearnerConfig)
    norm_scheme: NormScheme = field(default_factory=NormScheme)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {
    "dataset": DatasetConfig,
    "backbone": BackboneSection,
    "meta_learner": MetaLearnerConfig,
    "norm_scheme": NormScheme,
    "schedule": ScheduleConfig,
    "evaluation": EvaluationConfig,
}


def _key_lines(node, prefix=()) -> dict:
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            lines[path] = k.start_mark.line + 1
            lines.update(_key_lines(v, path))
    return lines


def _where(lines: dict, path: tuple) -> str:
    line = lines.get(path)
    return f"line {line}: " if line else ""


def _build(cls, raw: Any, lines: dict, path: tuple):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{_where(lines, path)}section {'.'.join(path)} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{_where(lines, path + (key,))}unknown key {'.'.join(path + (key,))!r}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(lines, path)}invalid {'.'.join(path)} section: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{where}malformed config: {getattr(exc, 'problem', exc)}") from None
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    lines = _key_lines(node) if node is not None else {}
    kwargs = {}
    for key, value in raw.items():
        if key == "name":
            kwargs["name"] = str(value)
        elif key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, lines, (key,))
        else:
            raise ConfigError(f"{_where(lines, (key,))}unknown section {key!r}")
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset.kind not in ("synthetic", "directory"):
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'directory', got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "directory" and not cfg.dataset.root:
        raise ConfigError("dataset.root is required for directory datasets")
    if cfg.meta_learner.kind not in ("maml", "protonets"):
        raise ConfigError(f"meta_learner.kind must be 'maml' or 'protonets', got {cfg.meta_learner.kind!r}")
    if cfg.schedule.optimizer not in ("sgd", "momentum", "adam"):
        raise ConfigError(f"schedule.optimizer must be sgd, momentum or adam, got {cfg.schedule.optimizer!r}")
    if cfg.schedule.snapshot not in SNAPSHOT_RULES:
        raise ConfigError(f"schedule.snapshot must be one of {', '.join(SNAPSHOT_RULES)}, got {cfg.schedule.snapshot!r}")
    if cfg.dataset.variable_shot is not None and len(cfg.dataset.variable_shot) != 2:
        raise ConfigError("dataset.variable_shot must be [min_shot, max_shot]")
    from .learners import canonical_mode

    try:
        cfg.evaluation.modes = [canonical_mode(m) for m in cfg.evaluation.modes]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, apply_env: bool = True) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text())
    if apply_env and os.environ.get(SEED_ENV):
        try:
            cfg.schedule.seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg


def config_from_dict(raw: dict) -> ExperimentConfig:
    return parse_config(yaml.safe_dump(raw))
