"""Conv backbone: blocks of conv3x3 -> norm -> relu -> maxpool2x2.

Parameters are a flat ``name -> ndarray`` dict so meta-learners can adapt
copies without touching the normalization-layer state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .norm import NormLayer, NormScheme, RunningMoments
from .ops import activation_and_pool, affine_dense, conv2d
from .tensor import Parameter, Tensor, get_default_dtype

MAGIC = b"MNRM"
FORMAT_VERSION = 1


@dataclass
class BackboneConfig:
    in_channels: int = 1
    image_size: int = 32
    blocks: int = 4
    channels: int = 32
    kernel: int = 3

    def feature_size(self) -> int:
        side = self.image_size
        for _ in range(self.blocks):
            if side % 2:
                raise ValueError(f"image size {self.image_size} cannot be pooled {self.blocks} times by 2x2")
            side //= 2
        return (self.channels if self.blocks else self.in_channels) * side * side


class Backbone:
    """Feature extractor with an optional linear head of width ``head_width``."""

    def __init__(self, cfg: BackboneConfig, scheme: NormScheme, head_width: Optional[int] = None,
                 seed: int = 0, dtype=None):
        self.cfg = cfg
        self.scheme = scheme
        self.head_width = head_width
        self.dtype = np.dtype(dtype or get_default_dtype()).type
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.norms: list[NormLayer] = []
        c_in = cfg.in_channels
        k = cfg.kernel
        for b in range(cfg.blocks):
            fan_in = c_in * k * k
            self.params[f"block{b}.conv.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cfg.channels, c_in, k, k)).astype(self.dtype)
            self.params[f"block{b}.conv.bias"] = np.zeros(cfg.channels, dtype=self.dtype)
            layer = NormLayer(scheme, cfg.channels, f"block{b}.norm")
            layer.running = RunningMoments.fresh(cfg.channels, scheme.momentum, self.dtype)
            for name, (shape, value) in layer.parameter_specs().items():
                self.params[name] = np.full(shape, value, dtype=self.dtype)
            self.norms.append(layer)
            c_in = cfg.channels
        if head_width is not None:
            features = cfg.feature_size()
            limit = np.sqrt(6.0 / (features + head_width))
            self.params["head.weight"] = rng.uniform(-limit, limit, (features, head_width)).astype(self.dtype)
            self.params["head.bias"] = np.zeros(head_width, dtype=self.dtype)
        else:
            cfg.feature_size()

    # parameter views --------------------------------------------------------
    def meta_only_names(self) -> set[str]:
        """Blend parameters: meta-learned, never adapted in an inner loop."""
        return {n for n in self.params if n.endswith(".scale") or n.endswith(".offset")}

    def inner_names(self) -> list[str]:
        meta = self.meta_only_names()
        return [n for n in self.params if n not in meta]

    def tensors(self, values: Optional[Mapping[str, np.ndarray]] = None, grad_names=None) -> dict[str, Tensor]:
        values = self.params if values is None else values
        grad_names = set(values) if grad_names is None else set(grad_names)
        return {n: Parameter(v, n) if n in grad_names else Tensor(v, name=n) for n, v in values.items()}

    # episode protocol ---------------------------------------------------------
    def set_phase(self, phase: str) -> None:
        if phase not in ("meta_train", "meta_test"):
            raise ValueError(f"unknown phase {phase!r}")
        for layer in self.norms:
            layer.phase = phase

    def set_pass(self, pass_kind: str) -> None:
        if pass_kind not in ("context", "target"):
            raise ValueError(f"unknown pass kind {pass_kind!r}")
        for layer in self.norms:
            layer.pass_kind = pass_kind

    def reset_episode(self) -> None:
        for layer in self.norms:
            layer.reset_episode()

    def set_track_running(self, flag: bool) -> None:
        for layer in self.norms:
            layer.track_running = flag

    def forward(self, x: Tensor, params: Mapping[str, Tensor], with_head: bool = True) -> Tensor:
        h = x
        pad = self.cfg.kernel // 2
        for b, layer in enumerate(self.norms):
            h = conv2d(h, params[f"block{b}.conv.weight"], params[f"block{b}.conv.bias"], 1, pad)
            h = layer.forward(h, params)
            h = activation_and_pool(h, "relu_then_maxpool")
        h = h.reshape(h.shape[0], -1)
        if with_head and self.head_width is not None:
            h = affine_dense(h, params["head.weight"], params["head.bias"])
        return h

    # state ------------------------------------------------------------------
    def running_state(self) -> dict[str, np.ndarray]:
        state = {}
        for layer in self.norms:
            state[f"{layer.name}.running_mean"] = layer.running.mean.copy()
            state[f"{layer.name}.running_var"] = layer.running.variance.copy()
        return state

    def snapshot(self) -> dict[str, np.ndarray]:
        """Parameters plus running moments, deep-copied."""
        snap = {n: v.copy() for n, v in self.params.items()}
        snap.update(self.running_state())
        return snap

    def load_snapshot(self, snap: Mapping[str, np.ndarray]) -> None:
        for n in self.params:
            if snap[n].shape != self.params[n].shape:
                raise ValueError(f"snapshot shape mismatch for {n}: {snap[n].shape} vs {self.params[n].shape}")
            self.params[n] = np.asarray(snap[n], dtype=self.dtype).copy()
        for layer in self.norms:
            mean = snap.get(f"{layer.name}.running_mean")
            if mean is not None:
                layer.running.mean = np.asarray(mean, dtype=self.dtype).copy()
                layer.running.variance = np.asarray(snap[f"{layer.name}.running_var"], dtype=self.dtype).copy()


def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    """Write the flat little-endian parameter format (float32 payloads)."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        value = np.asarray(value)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
