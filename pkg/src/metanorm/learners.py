"""First-order MAML and Prototypical Networks on the conv backbone."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .backbone import Backbone
from .data import Episode
from .norm import CONTEXT_SCHEMES
from .ops import softmax_cross_entropy
from .tensor import Tape, Tensor, backward, make_result

log = logging.getLogger(__name__)

MODES = ("all", "per_example", "per_class")
_MODE_ALIASES = {"example": "per_example", "class": "per_class"}


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}; expected one of {MODES}")
    return mode


def target_groups(labels: np.ndarray, mode: str) -> list[np.ndarray]:
    """Index sets fed to the network together in one target pass."""
    mode = canonical_mode(mode)
    if mode == "all":
        return [np.arange(len(labels))]
    if mode == "per_example":
        return [np.array([i]) for i in range(len(labels))]
    return [np.flatnonzero(labels == c) for c in np.unique(labels)]


@dataclass
class MAMLConfig:
    inner_lr: float = 0.4
    inner_steps_train: int = 1
    inner_steps_eval: int = 10
    first_order: bool = True
    outer_lr: float = 1e-3

    def __post_init__(self):
        if self.inner_lr < 0 or self.inner_steps_train < 0 or self.inner_steps_eval < 0:
            raise ValueError(f"invalid MAML config {self}")
        if not self.first_order:
            raise ValueError("only first-order MAML is implemented")


@dataclass
class AdaptedParams:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    prototypes: Optional[np.ndarray] = None


def _check_finite(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite inner-loop loss at step {step}")


def _inner_step_loss(backbone: Backbone, fast: Mapping[str, np.ndarray], episode: Episode, names) -> tuple[Tensor, dict]:
    tensors = backbone.tensors(fast, grad_names=names)
    backbone.set_pass("context")
    logits = backbone.forward(Tensor(episode.context_inputs, dtype=backbone.dtype), tensors)
    return softmax_cross_entropy(logits, episode.context_labels), tensors


def maml_inner_adapt(backbone: Backbone, episode: Episode, cfg: MAMLConfig, steps: Optional[int] = None,
                     cache_context: bool = True) -> AdaptedParams:
    """SGD on the context loss, each inner gradient treated as a constant.

    With ``cache_context`` the adapted parameters get one more context pass
    so context-statistic layers hold moments consistent with them.
    """
    steps = cfg.inner_steps_train if steps is None else steps
    names = backbone.inner_names()
    fast = {n: v.copy() for n, v in backbone.params.items()}
    backbone.reset_episode()
    for step in range(steps):
        with Tape():
            loss, tensors = _inner_step_loss(backbone, fast, episode, names)
        _check_finite(loss, step)
        backward(loss)
        for n in names:
            fast[n] = fast[n] - cfg.inner_lr * tensors[n].grad
    if cache_context:
        backbone.set_pass("context")
        backbone.forward(Tensor(episode.context_inputs, dtype=backbone.dtype), backbone.tensors(fast, grad_names=()))
    return AdaptedParams(fast)


def _target_loss(backbone: Backbone, fast: Mapping[str, np.ndarray], episode: Episode) -> tuple[Tensor, dict]:
    """Target cross-entropy under ``fast``, on one tape with the context pass."""
    with Tape():
        tensors = backbone.tensors(fast)
        if backbone.scheme.kind in CONTEXT_SCHEMES:
            backbone.set_pass("context")
            backbone.forward(Tensor(episode.context_inputs, dtype=backbone.dtype), tensors)
        backbone.set_pass("target")
        logits = backbone.forward(Tensor(episode.target_inputs, dtype=backbone.dtype), tensors)
        loss = softmax_cross_entropy(logits, episode.target_labels)
    backward(loss)
    return loss, tensors


def maml_meta_gradient(backbone: Backbone, episodes: Sequence[Episode], cfg: MAMLConfig) -> tuple[float, dict]:
    """Mean target loss over episodes and its first-order gradient w.r.t. theta."""
    if not episodes:
        raise ValueError("empty episode batch")
    grads = {n: np.zeros_like(v) for n, v in backbone.params.items()}
    total = 0.0
    for ep in episodes:
        adapted = maml_inner_adapt(backbone, ep, cfg, cache_context=False)
        loss, tensors = _target_loss(backbone, adapted.params, ep)
        total += loss.item()
        for n, t in tensors.items():
            if t.grad is not None:
                grads[n] += t.grad
    scale = 1.0 / len(episodes)
    return total * scale, {n: g * scale for n, g in grads.items()}


def maml_meta_step(backbone: Backbone, episodes: Sequence[Episode], cfg: MAMLConfig, optimizer) -> float:
    loss, grads = maml_meta_gradient(backbone, episodes, cfg)
    optimizer.step(backbone.params, grads)
    return loss


# prototypical networks ---------------------------------------------------------

def class_means(x: Tensor, labels: np.ndarray) -> Tensor:
    """Row means of ``x`` per class, classes in sorted label order."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    masks = labels[None, :] == classes[:, None]
    counts = masks.sum(axis=1, keepdims=True).astype(x.dtype)
    weights = masks / counts
    out = weights @ x.data
    return make_result("class_means", out, (x,), lambda g: (weights.T @ g,))


def _distance_logits(emb: Tensor, prototypes: Tensor, distance: str) -> Tensor:
    M, D = emb.shape
    K = prototypes.shape[0]
    if distance == "cosine":
        emb = emb / ((emb * emb).sum(axis=1, keepdims=True) + 1e-8).sqrt()
        prototypes = prototypes / ((prototypes * prototypes).sum(axis=1, keepdims=True) + 1e-8).sqrt()
        return (emb.reshape(M, 1, D) * prototypes.reshape(1, K, D)).sum(axis=2) * 10.0
    if distance != "euclidean":
        raise ValueError(f"unknown distance {distance!r}")
    diff = emb.reshape(M, 1, D) - prototypes.reshape(1, K, D)
    return -(diff * diff).sum(axis=2)


def protonet_prototypes(backbone: Backbone, episode: Episode, params: Mapping[str, Tensor]) -> Tensor:
    labels = np.asarray(episode.context_labels)
    present = np.unique(labels)
    if not np.array_equal(present, np.arange(episode.way)):
        missing = sorted(set(range(episode.way)) - set(present.tolist()))
        raise ValueError(f"classes {missing} have no context examples")
    backbone.set_pass("context")
    emb = backbone.forward(Tensor(episode.context_inputs, dtype=backbone.dtype), params, with_head=False)
    return class_means(emb, labels)


def protonet_logits(backbone: Backbone, episode: Episode, params: Optional[Mapping[str, Tensor]] = None,
                    distance: str = "euclidean") -> Tensor:
    """Negative squared distances from each target embedding to each prototype."""
    params = backbone.tensors(grad_names=()) if params is None else params
    backbone.reset_episode()
    protos = protonet_prototypes(backbone, episode, params)
    backbone.set_pass("target")
    emb = backbone.forward(Tensor(episode.target_inputs, dtype=backbone.dtype), params, with_head=False)
    return _distance_logits(emb, protos, distance)


# learner wrappers ------------------------------------------------------------------

class MetaLearner:
    """Common surface used by the training loop and the benchmark."""

    name = "base"

    def __init__(self, backbone: Backbone):
        self.backbone = backbone

    def meta_gradient(self, episodes: Sequence[Episode]) -> tuple[float, dict]:
        raise NotImplementedError

    def predict_modes(self, episode: Episode, modes: Iterable[str]) -> dict[str, np.ndarray]:
        raise NotImplementedError


class MAMLLearner(MetaLearner):
    name = "maml"

    def __init__(self, backbone: Backbone, cfg: MAMLConfig):
        super().__init__(backbone)
        self.cfg = cfg

    def meta_gradient(self, episodes):
        return maml_meta_gradient(self.backbone, episodes, self.cfg)

    def predict_modes(self, episode, modes):
        # running-moment schemes can blow up under adaptation; that is handled below
        with np.errstate(over="ignore", invalid="ignore"):
            return self._predict_modes(episode, modes)

    def _predict_modes(self, episode, modes):
        """Predictions per mode, taken at the inner step with the best accuracy.

        Adaptation touches only the context set, so it runs once and every
        mode is scored after each of the evaluation steps.
        """
        bb = self.backbone
        modes = [canonical_mode(m) for m in modes]
        names = bb.inner_names()
        steps = self.cfg.inner_steps_eval
        fast = {n: v.copy() for n, v in bb.params.items()}
        best = {m: (-1.0, None) for m in modes}
        bb.reset_episode()
        target = episode.target_inputs
        for step in range(steps + 1):
            with Tape():
                loss, tensors = _inner_step_loss(bb, fast, episode, names)
            if not np.isfinite(loss.data).all():
                # diverged adaptation: keep the best of the steps already scored
                log.info("inner loop diverged at evaluation step %d", step)
                if all(best[m][1] is None for m in modes):
                    chance = np.zeros(len(target), dtype=np.int64)
                    best = {m: (0.0, chance) for m in modes}
                break
            if step > 0 or steps == 0:
                bb.set_pass("target")
                for m in modes:
                    preds = np.empty(len(target), dtype=np.int64)
                    for idx in target_groups(episode.target_labels, m):
                        logits = bb.forward(Tensor(target[idx], dtype=bb.dtype), tensors)
                        preds[idx] = logits.data.argmax(axis=1)
                    acc = float(np.mean(preds == episode.target_labels))
                    if acc > best[m][0]:
                        best[m] = (acc, preds)
            if step < steps:
                backward(loss)
                for n in names:
                    fast[n] = fast[n] - self.cfg.inner_lr * tensors[n].grad
        return {m: best[m][1] for m in modes}


class ProtoNetLearner(MetaLearner):
    name = "protonets"

    def __init__(self, backbone: Backbone, distance: str = "euclidean"):
        super().__init__(backbone)
        self.distance = distance

    def meta_gradient(self, episodes):
        if not episodes:
            raise ValueError("empty episode batch")
        bb = self.backbone
        grads = {n: np.zeros_like(v) for n, v in bb.params.items()}
        total = 0.0
        for ep in episodes:
            with Tape():
                tensors = bb.tensors()
                logits = protonet_logits(bb, ep, tensors, self.distance)
                loss = softmax_cross_entropy(logits, ep.target_labels)
            backward(loss)
            total += loss.item()
            for n, t in tensors.items():
                if t.grad is not None:
                    grads[n] += t.grad
        scale = 1.0 / len(episodes)
        return total * scale, {n: g * scale for n, g in grads.items()}

    def predict_modes(self, episode, modes):
        bb = self.backbone
        params = bb.tensors(grad_names=())
        bb.reset_episode()
        protos = protonet_prototypes(bb, episode, params)
        bb.set_pass("target")
        out = {}
        for m in modes:
            m = canonical_mode(m)
            preds = np.empty(len(episode.target_labels), dtype=np.int64)
            for idx in target_groups(episode.target_labels, m):
                emb = bb.forward(Tensor(episode.target_inputs[idx], dtype=bb.dtype), params, with_head=False)
                preds[idx] = _distance_logits(emb, protos, self.distance).data.argmax(axis=1)
            out[m] = preds
        return out


def evaluate_episode(learner: MetaLearner, episode: Episode, mode: str = "all") -> tuple[float, np.ndarray]:
    """Meta-test accuracy and predictions for one episode in one feeding mode."""
    mode = canonical_mode(mode)
    previous = [layer.phase for layer in learner.backbone.norms]
    learner.backbone.set_phase("meta_test")
    try:
        preds = learner.predict_modes(episode, [mode])[mode]
    finally:
        for layer, phase in zip(learner.backbone.norms, previous):
            layer.phase = phase
        learner.backbone.reset_episode()
    return float(np.mean(preds == episode.target_labels)), preds


def evaluate_modes(learner: MetaLearner, episode: Episode, modes: Iterable[str]) -> dict[str, tuple[float, np.ndarray]]:
    previous = [layer.phase for layer in learner.backbone.norms]
    learner.backbone.set_phase("meta_test")
    try:
        preds = learner.predict_modes(episode, modes)
    finally:
        for layer, phase in zip(learner.backbone.norms, previous):
            layer.phase = phase
        learner.backbone.reset_episode()
    return {m: (float(np.mean(p == episode.target_labels)), p) for m, p in preds.items()}


# outer loop -----------------------------------------------------------------------------

@dataclass
class Optimizer:
    """Plain SGD, SGD with momentum, or Adam over a ``name -> ndarray`` dict."""

    lr: float
    kind: str = "momentum"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    state: dict = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def step(self, params: dict, grads: Mapping[str, np.ndarray]) -> None:
        self.steps += 1
        for n, g in grads.items():
            if self.kind == "sgd":
                update = g
            elif self.kind == "momentum":
                v = self.state.get(n)
                v = g.copy() if v is None else self.momentum * v + g
                self.state[n] = v
                update = v
            else:
                b1, b2 = self.betas
                m, v = self.state.get(n, (np.zeros_like(g), np.zeros_like(g)))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[n] = (m, v)
                update = (m / (1 - b1**self.steps)) / (np.sqrt(v / (1 - b2**self.steps)) + self.eps)
            params[n] = (params[n] - self.lr * update).astype(params[n].dtype)


@dataclass
class TrainSchedule:
    iterations: int = 200
    outer_lr: float = 1e-3
    optimizer: str = "momentum"
    momentum: float = 0.9
    meta_batch: int = 1
    val_every: int = 50
    val_episodes: int = 50


@dataclass
class TrainResult:
    rows: list[dict]
    final: dict[str, np.ndarray]
    best: dict[str, np.ndarray]
    best_val_accuracy: float
    best_iteration: int


def validation_accuracy(learner: MetaLearner, episodes: Sequence[Episode]) -> float:
    if not episodes:
        return math.nan
    return float(np.mean([evaluate_episode(learner, ep, "all")[0] for ep in episodes]))


def episodic_meta_train(learner: MetaLearner, next_episode: Callable[[], Episode], schedule: TrainSchedule,
                        val_episodes: Sequence[Episode] = (), progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Outer optimization; keeps both the final and best-validation snapshots."""
    bb = learner.backbone
    opt = Optimizer(schedule.outer_lr, schedule.optimizer, schedule.momentum)
    rows = []
    best_acc, best_it, best = -1.0, 0, bb.snapshot()
    for it in range(1, schedule.iterations + 1):
        bb.set_phase("meta_train")
        episodes = [next_episode() for _ in range(schedule.meta_batch)]
        loss, grads = learner.meta_gradient(episodes)
        opt.step(bb.params, grads)
        row = {"iteration": it, "train_loss": loss, "val_accuracy": math.nan}
        if val_episodes and (it % schedule.val_every == 0 or it == schedule.iterations):
            acc = validation_accuracy(learner, val_episodes)
            row["val_accuracy"] = acc
            if acc > best_acc:
                best_acc, best_it, best = acc, it, bb.snapshot()
            log.info("iter %d loss %.4f val %.3f", it, loss, acc)
        rows.append(row)
        if progress is not None:
            progress(row)
    bb.set_phase("meta_train")
    return TrainResult(rows, bb.snapshot(), best, best_acc, best_it)
