"""Normalization layers for episodic meta-learning.

A :class:`NormLayer` runs a two-phase protocol per episode: the context pass
computes (and, for context-statistic schemes, caches) task moments, and the
target pass consumes them. Every scheme reduces to choosing a
:class:`MomentPair` and then applying ``gamma * (a - mu) / sqrt(var + eps) + beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np

from .ops import reduce_moments
from .tensor import Tensor, clip, sigmoid, stop_gradient

KINDS = ("CBN", "TBN", "BRN", "LN", "IN", "GN", "RN", "MetaBN", "TaskNormL", "TaskNormI", "TaskNormR")
CONTEXT_SCHEMES = frozenset({"RN", "MetaBN", "TaskNormL", "TaskNormI", "TaskNormR"})
TASKNORM_KINDS = frozenset({"TaskNormL", "TaskNormI", "TaskNormR"})
BLEND_MODES = ("functional_shared", "functional_per_channel", "independent_shared", "independent_per_channel")
AXES_KINDS = ("per_channel", "per_instance", "per_instance_channel", "per_instance_group")


@dataclass
class MomentPair:
    mean: Tensor
    variance: Tensor
    axes_kind: str

    def __post_init__(self):
        if self.axes_kind not in AXES_KINDS:
            raise ValueError(f"unknown axes kind {self.axes_kind!r}")
        if self.mean.shape != self.variance.shape:
            raise ValueError(f"mean shape {self.mean.shape} != variance shape {self.variance.shape}")


@dataclass
class RunningMoments:
    mean: np.ndarray
    variance: np.ndarray
    momentum: float = 0.1
    update_count: int = 0

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, dtype=np.float32) -> "RunningMoments":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)

    def as_pair(self) -> MomentPair:
        return MomentPair(Tensor(self.mean), Tensor(self.variance), "per_channel")


@dataclass
class AffineParams:
    gamma: Tensor
    beta: Tensor
    epsilon: float = 1e-5


@dataclass
class BlendParams:
    mode: str
    scale: Tensor
    offset: Tensor


@dataclass
class NormScheme:
    """Which normalization to run, plus its scheme-specific knobs.

    ``context_blend`` decides whether TaskNorm/RN also blend secondary moments
    on the context pass; ``None`` picks the per-kind default (on for TaskNorm
    variants, off for RN, whose context pass matches MetaBN).
    """

    kind: str = "TaskNormI"
    group_count: int = 4
    blend_mode: str = "functional_shared"
    brn_rmax: float = 3.0
    brn_dmax: float = 5.0
    epsilon: float = 1e-5
    momentum: float = 0.1
    context_blend: Optional[bool] = None
    cbn_update_from_target: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}; expected one of {KINDS}")
        if self.blend_mode not in BLEND_MODES:
            raise ValueError(f"unknown blend mode {self.blend_mode!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")

    @property
    def blends_context(self) -> bool:
        if self.context_blend is not None:
            return self.context_blend
        return self.kind in TASKNORM_KINDS

    @property
    def has_blend_params(self) -> bool:
        return self.kind in TASKNORM_KINDS

    @property
    def transductive(self) -> bool:
        return self.kind == "TBN"


# moment estimators ----------------------------------------------------------

def batch_moments(a: Tensor) -> MomentPair:
    mean, var = reduce_moments(a, (0, 2, 3))
    return MomentPair(mean, var, "per_channel")


def layer_moments(a: Tensor) -> MomentPair:
    mean, var = reduce_moments(a, (1, 2, 3))
    return MomentPair(mean, var, "per_instance")


def instance_moments(a: Tensor) -> MomentPair:
    mean, var = reduce_moments(a, (2, 3))
    return MomentPair(mean, var, "per_instance_channel")


def group_moments(a: Tensor, groups: int) -> MomentPair:
    """Per (instance, group) moments over contiguous channel groups."""
    B, C, H, W = a.shape
    if groups < 1 or C % groups:
        raise ValueError(f"group count {groups} does not divide {C} channels")
    mean, var = reduce_moments(a.reshape(B, groups, (C // groups) * H * W), (2,))
    return MomentPair(mean, var, "per_instance_group")


def _broadcast_shape(m: MomentPair, shape: tuple) -> tuple:
    B, C = shape[0], shape[1]
    got = m.mean.shape
    kind = m.axes_kind
    if kind == "per_channel" and got == (C,):
        return (1, C, 1, 1)
    if kind == "per_instance" and got == (B,):
        return (B, 1, 1, 1)
    if kind == "per_instance_channel" and got == (B, C):
        return (B, C, 1, 1)
    raise ValueError(f"{kind} moments of shape {got} are incompatible with activations {shape}")


def apply_normalization(a: Tensor, m: MomentPair, affine: AffineParams) -> Tensor:
    """gamma * (a - mean) / sqrt(var + eps) + beta, moments broadcast over their reduced axes."""
    return _affine(_standardize(a, m, affine.epsilon), affine)


def _standardize(a: Tensor, m: MomentPair, eps: float) -> Tensor:
    if a.ndim != 4:
        raise ValueError(f"expected BxCxHxW activations, got {a.shape}")
    B, C, H, W = a.shape
    if m.axes_kind == "per_instance_group":
        if m.mean.ndim != 2 or m.mean.shape[0] != B or C % m.mean.shape[1]:
            raise ValueError(f"group moments of shape {m.mean.shape} are incompatible with activations {a.shape}")
        G = m.mean.shape[1]
        grouped = a.reshape(B, G, C // G, H, W)
        mu = m.mean.reshape(B, G, 1, 1, 1)
        var = m.variance.reshape(B, G, 1, 1, 1)
        return ((grouped - mu) / (var + eps).sqrt()).reshape(B, C, H, W)
    shape = _broadcast_shape(m, a.shape)
    return (a - m.mean.reshape(shape)) / (m.variance.reshape(shape) + eps).sqrt()


def _affine(xhat: Tensor, affine: AffineParams) -> Tensor:
    C = xhat.shape[1]
    if affine.gamma.shape != (C,) or affine.beta.shape != (C,):
        raise ValueError(f"affine parameters {affine.gamma.shape}/{affine.beta.shape} do not match {C} channels")
    return xhat * affine.gamma.reshape(1, C, 1, 1) + affine.beta.reshape(1, C, 1, 1)


# blending ---------------------------------------------------------------------

def compute_alpha(blend: BlendParams, context_size: int) -> Tensor:
    """sigmoid(scale * |D| + offset), or sigmoid(offset) for independent modes."""
    if blend.mode.startswith("functional"):
        if context_size < 1:
            raise ValueError("context_size must be >= 1")
        return sigmoid(blend.scale * float(context_size) + blend.offset)
    return sigmoid(blend.offset)


def reptile_alpha(context_size: int) -> float:
    if context_size < 1:
        raise ValueError("context_size must be >= 1")
    return context_size / (1.0 + context_size)


def alpha_curve(mode: str, scale: np.ndarray, offset: np.ndarray, sizes) -> np.ndarray:
    """Off-graph alpha values for each context size (rows) and channel (columns)."""
    sizes = np.asarray(sizes, dtype=np.float64)[:, None]
    scale = np.asarray(scale, dtype=np.float64).reshape(1, -1)
    offset = np.asarray(offset, dtype=np.float64).reshape(1, -1)
    logits = scale * sizes + offset if mode.startswith("functional") else np.broadcast_to(offset, (len(sizes), offset.shape[1]))
    return 1.0 / (1.0 + np.exp(-logits))


def blend_moments(primary: MomentPair, secondary: MomentPair, alpha: Tensor) -> MomentPair:
    """Pool context moments with secondary moments (pooled-variance rule)."""
    if primary.axes_kind != "per_channel":
        raise ValueError("primary moments must be per-channel")
    if np.any(alpha.data < 0) or np.any(alpha.data > 1) or not np.all(np.isfinite(alpha.data)):
        raise ValueError("blend factor alpha must lie in [0, 1]")
    C = primary.mean.shape[0]
    if alpha.shape not in ((1,), (C,), ()):
        raise ValueError(f"alpha of shape {alpha.shape} does not match {C} channels")
    kind = secondary.axes_kind
    if kind == "per_instance":
        B = secondary.mean.shape[0]
        mu_s, var_s = secondary.mean.reshape(B, 1), secondary.variance.reshape(B, 1)
    elif kind == "per_instance_channel":
        if secondary.mean.shape[1] != C:
            raise ValueError(f"secondary moments {secondary.mean.shape} do not match {C} channels")
        mu_s, var_s = secondary.mean, secondary.variance
    elif kind == "per_channel":
        if secondary.mean.shape != (C,):
            raise ValueError(f"secondary moments {secondary.mean.shape} do not match {C} channels")
        mu_s, var_s = secondary.mean, secondary.variance
    else:
        raise ValueError(f"cannot blend {kind} moments")
    mu_p, var_p = primary.mean, primary.variance
    beta = 1.0 - alpha
    mu = alpha * mu_p + beta * mu_s
    dp = mu_p - mu
    ds = mu_s - mu
    var = alpha * (var_p + dp * dp) + beta * (var_s + ds * ds)
    return MomentPair(mu, var, "per_channel" if kind == "per_channel" else "per_instance_channel")


# running moments and BRN --------------------------------------------------------

def update_running_moments(r: RunningMoments, m: MomentPair, phase: str = "meta_train") -> RunningMoments:
    """EMA update; the result is off-tape."""
    if phase != "meta_train":
        raise RuntimeError("running moments can only be updated during meta-training")
    if m.axes_kind != "per_channel":
        raise ValueError("running moments track per-channel statistics")
    k = r.momentum
    mean = ((1.0 - k) * r.mean + k * m.mean.data).astype(r.mean.dtype)
    var = ((1.0 - k) * r.variance + k * m.variance.data).astype(r.variance.dtype)
    return replace(r, mean=mean, variance=var, update_count=r.update_count + 1)


def brn_correction(m: MomentPair, r: RunningMoments, rmax: float, dmax: float, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Gradient-blocked renormalization factors (r, d) against running moments."""
    sigma_r = np.sqrt(r.variance.astype(m.mean.dtype) + eps)
    sigma_bn = (m.variance + eps).sqrt()
    r_factor = stop_gradient(clip(sigma_bn / sigma_r, 1.0 / rmax, rmax))
    d_shift = stop_gradient(clip((m.mean - r.mean.astype(m.mean.dtype)) / sigma_r, -dmax, dmax))
    return r_factor, d_shift


# the layer ---------------------------------------------------------------------

@dataclass
class NormLayer:
    """Episode-scoped normalization state for one layer.

    Parameters live outside the layer (so meta-learners can swap in adapted
    copies); ``forward`` looks them up by ``<name>.gamma`` etc.
    """

    scheme: NormScheme
    channels: int
    name: str
    running: RunningMoments = None
    cached_context: Optional[MomentPair] = None
    context_size: int = 0
    phase: str = "meta_train"
    pass_kind: str = "context"
    track_running: bool = True
    alpha_override: Optional[Callable[[int], float]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.scheme.kind == "GN" and self.channels % self.scheme.group_count:
            raise ValueError(f"GN group count {self.scheme.group_count} does not divide {self.channels} channels")
        if self.running is None:
            self.running = RunningMoments.fresh(self.channels, self.scheme.momentum)

    def parameter_specs(self) -> dict[str, tuple[tuple, float]]:
        """Parameter name -> (shape, constant initial value)."""
        C = self.channels
        specs = {f"{self.name}.gamma": ((C,), 1.0), f"{self.name}.beta": ((C,), 0.0)}
        if self.scheme.has_blend_params:
            shape = (C,) if self.scheme.blend_mode.endswith("per_channel") else (1,)
            specs[f"{self.name}.scale"] = (shape, 0.0)
            specs[f"{self.name}.offset"] = (shape, 0.0)
        return specs

    def reset_episode(self) -> None:
        self.cached_context = None
        self.context_size = 0

    def affine(self, params: Mapping[str, Tensor]) -> AffineParams:
        return AffineParams(params[f"{self.name}.gamma"], params[f"{self.name}.beta"], self.scheme.epsilon)

    def blend(self, params: Mapping[str, Tensor]) -> BlendParams:
        return BlendParams(self.scheme.blend_mode, params[f"{self.name}.scale"], params[f"{self.name}.offset"])

    def _alpha(self, params, context_size: int, like: Tensor) -> Tensor:
        if self.scheme.kind == "RN":
            return Tensor(np.array([reptile_alpha(context_size)]), dtype=like.dtype.type)
        if self.alpha_override is not None:
            return Tensor(np.array([self.alpha_override(context_size)]), dtype=like.dtype.type)
        return compute_alpha(self.blend(params), context_size)

    def _update_running(self, m: MomentPair) -> None:
        if self.track_running:
            self.running = update_running_moments(self.running, m, self.phase)

    def _secondary(self, a: Tensor) -> MomentPair:
        kind = self.scheme.kind
        if kind == "TaskNormL":
            return layer_moments(a)
        if kind == "TaskNormR":
            return self.running.as_pair()
        return instance_moments(a)

    def forward(self, a: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        """Normalize ``a`` according to the scheme, phase and pass kind."""
        if a.ndim != 4 or a.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected (B, {self.channels}, H, W) activations, got {a.shape}")
        kind = self.scheme.kind
        training = self.phase == "meta_train"
        context = self.pass_kind == "context"
        affine = self.affine(params)

        if kind == "CBN":
            if not training:
                return apply_normalization(a, self.running.as_pair(), affine)
            m = batch_moments(a)
            if context or self.scheme.cbn_update_from_target:
                self._update_running(m)
            return apply_normalization(a, m, affine)

        if kind == "BRN":
            if not training:
                return apply_normalization(a, self.running.as_pair(), affine)
            m = batch_moments(a)
            r, d = brn_correction(m, self.running, self.scheme.brn_rmax, self.scheme.brn_dmax, self.scheme.epsilon)
            C = self.channels
            xhat = _standardize(a, m, affine.epsilon) * r.reshape(1, C, 1, 1) + d.reshape(1, C, 1, 1)
            if context:
                self._update_running(m)
            return _affine(xhat, affine)

        if kind == "TBN":
            return apply_normalization(a, batch_moments(a), affine)
        if kind == "LN":
            return apply_normalization(a, layer_moments(a), affine)
        if kind == "IN":
            return apply_normalization(a, instance_moments(a), affine)
        if kind == "GN":
            return apply_normalization(a, group_moments(a, self.scheme.group_count), affine)

        # context-statistic schemes: RN, MetaBN, TaskNorm-*
        if context:
            primary = batch_moments(a)
            self.cached_context = primary
            self.context_size = a.shape[0]
            if kind == "TaskNormR" and training:
                self._update_running(primary)
            if kind == "MetaBN" or not self.scheme.blends_context:
                return apply_normalization(a, primary, affine)
        else:
            if self.cached_context is None:
                raise RuntimeError(f"{self.name}: context pass required first")
            primary = self.cached_context
            if kind == "MetaBN":
                return apply_normalization(a, primary, affine)
        alpha = self._alpha(params, self.context_size, a)
        return apply_normalization(a, blend_moments(primary, self._secondary(a), alpha), affine)


def alpha_at(layer: NormLayer, params: Mapping[str, Tensor], context_size: int) -> float:
    """Mean blend factor of a layer at a context size (for logging)."""
    if layer.scheme.kind == "RN":
        return reptile_alpha(context_size)
    if not layer.scheme.has_blend_params:
        return math.nan
    return float(compute_alpha(layer.blend(params), context_size).data.mean())
