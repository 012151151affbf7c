"""Network primitives on top of :mod:`metanorm.tensor`.

Every op here evaluates batch elements independently with fixed-shape
kernels (stacked matmuls, per-row reductions), so an example's output does
not depend bitwise on which other examples share its batch. The
transductivity audit relies on this.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_result


def reduce_moments(x: Tensor, axes) -> tuple[Tensor, Tensor]:
    """Mean and biased variance of ``x`` over ``axes`` (non-reduced dims kept).

    Both outputs are differentiable with respect to ``x``.
    """
    axes = tuple(sorted(set(int(a) for a in axes)))
    for a in axes:
        if not 0 <= a < x.ndim:
            raise ValueError(f"axis {a} out of range for rank {x.ndim}")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count < 1:
        raise ValueError("empty reduction")
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    out_shape = tuple(n for i, n in enumerate(x.shape) if i not in axes) or (1,)

    def back_mean(g):
        return (np.broadcast_to(g.reshape(mean.shape), x.shape) / count,)

    def back_var(g):
        return (g.reshape(var.shape) * centered * (2.0 / count),)

    m = make_result("moments.mean", mean.reshape(out_shape), (x,), back_mean)
    v = make_result("moments.var", var.reshape(out_shape), (x,), back_var)
    return m, v


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW layout."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3] or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d shape mismatch: bias {bias.shape}, weight {weight.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = weight.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape} gives empty output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(B, C * k * k, Ho * Wo)
    w2 = weight.data.reshape(O, C * k * k)
    out = np.matmul(w2, cols).reshape(B, O, Ho, Wo)
    out += bias.data.reshape(1, O, 1, 1)

    def back(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(B, C, k, k, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
        return gx, gw, gb

    return make_result("conv2d", out, (x, weight, bias), back)


def affine_dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``x`` flattened to (B, F)."""
    B = x.shape[0]
    flat = x.data.reshape(B, -1)
    F, K = weight.shape
    if flat.shape[1] != F or bias.shape != (K,):
        raise ValueError(f"affine_dense inner-dimension mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = np.matmul(flat[:, None, :], weight.data)[:, 0, :] + bias.data

    def back(g):
        gx = np.matmul(g[:, None, :], weight.data.T)[:, 0, :].reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g if weight.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return make_result("affine_dense", out, (x, weight, bias), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def maxpool2x2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {H}x{W}")
    # window members in row-major order; ties go to the earliest
    parts = [x.data[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(parts[0], parts[1]), np.maximum(parts[2], parts[3]))

    def back(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), part in zip(((0, 0), (0, 1), (1, 0), (1, 1)), parts):
            hit = (part == out) & ~taken
            taken |= hit
            gx[:, :, i::2, j::2] = g * hit
        return (gx,)

    return make_result("maxpool2x2", out, (x,), back)


def activation_and_pool(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "maxpool2x2":
        return maxpool2x2(x)
    if kind == "relu_then_maxpool":
        return maxpool2x2(relu(x))
    raise ValueError(f"unknown activation kind {kind!r}")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(B), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return make_result("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), back)


def log_softmax_numpy(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
