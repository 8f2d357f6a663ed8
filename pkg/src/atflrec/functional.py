"""Differentiable neural-network ops built on :mod:`atflrec.tensor`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DegenerateBatchError, DimensionError, EmptyStackError
from .tensor import Tensor, as_tensor, make_node, unbroadcast

POOL_METHODS = ("max", "sum", "mean")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return make_node(s, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = expit(x.data)
    out = x.data * s

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return make_node(out, (x,), backward, "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    x2 = x.data * x.data  # x**3 takes numpy's slow generic pow path
    t = 0.044715 * x2
    t += 1.0
    t *= x.data
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x.data
    out *= 0.5

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du),)

    return make_node(out, (x,), backward, "gelu")


def softmax(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``additive_mask`` is a constant bias (e.g. -1e9)."""
    x = as_tensor(x)
    y = x.data.copy() if additive_mask is None else x.data + additive_mask
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), backward, "layer_norm")


@dataclass
class BatchNormState:
    """Running statistics of a batch-norm layer (mutated in train mode)."""

    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float | None = None,
) -> Tensor:
    """Normalize each column of a ``[batch, d]`` matrix.

    Train mode normalizes with the (biased) batch statistics and folds them
    into the running estimates with ``state.momentum``; eval mode uses the
    running estimates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or x.shape[1] != gamma.shape[-1]:
        raise DimensionError(f"batch_norm expects [batch, {gamma.shape[-1]}], got {x.shape}")
    eps = state.eps if eps is None else eps
    n = x.shape[0]
    if training:
        if n < 2:
            raise DegenerateBatchError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean.data[...] = (1 - m) * state.running_mean.data + m * mu
        state.running_var.data[...] = (1 - m) * state.running_var.data + m * var * n / (n - 1)
    else:
        mu = state.running_mean.data
        var = state.running_var.data
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
    xhat = np.where(np.isfinite(xhat), xhat, 0.0)
    out = gamma.data * xhat + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            if training:
                gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
            else:
                gx = gh * inv
        gg = unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return make_node(out, (x,), backward, "dropout")


def bce_with_logits(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on raw logits, stable for large |logit|.

    Per element: ``log(1 + exp(-(2y - 1) * z))``.  ``reduction`` is one of
    ``mean``, ``sum`` or ``none``.
    """
    logits = as_tensor(logits)
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), logits.shape)
    per = np.logaddexp(0.0, -(2.0 * y - 1.0) * logits.data)
    grad_per = expit(logits.data) - y
    if reduction == "none":
        return make_node(per, (logits,), lambda g: (g * grad_per,), "bce")
    scale = 1.0 / max(per.size, 1) if reduction == "mean" else 1.0
    out = np.asarray(per.sum() * scale)

    def backward(g):
        return (g * grad_per * scale,)

    return make_node(out, (logits,), backward, "bce")


def _check_pool(method: str) -> None:
    if method not in POOL_METHODS:
        raise ValueError(f"unknown pooling method {method!r}; expected one of {POOL_METHODS}")


def pool(stack: Sequence[Tensor], method: str) -> Tensor:
    """Elementwise max/sum/mean across a list of same-shape tensors.

    Max routes the gradient to the first (lowest-index) maximal input.
    """
    _check_pool(method)
    if len(stack) == 0:
        raise EmptyStackError("pool needs at least one tensor")
    stack = [as_tensor(t) for t in stack]
    shape = stack[0].shape
    for t in stack[1:]:
        if t.shape != shape:
            raise DimensionError(f"pool shape mismatch: {shape} vs {t.shape}")
    data = np.stack([t.data for t in stack])
    k = len(stack)
    if method == "sum":
        out = data.sum(axis=0)
    elif method == "mean":
        out = data.sum(axis=0) / k
    else:
        winner = data.argmax(axis=0)
        out = np.take_along_axis(data, winner[None], axis=0)[0]

    def backward(g):
        if method == "sum":
            return tuple(g for _ in range(k))
        if method == "mean":
            return tuple(g / k for _ in range(k))
        return tuple(np.where(winner == i, g, 0.0) for i in range(k))

    return make_node(out, stack, backward, f"pool_{method}")


def segment_pool(x: Tensor, offsets: Sequence[int], method: str) -> Tensor:
    """Reduce contiguous row blocks ``x[offsets[i]:offsets[i+1]]``.

    Returns a ``[n_segments, ...]`` tensor.  Every segment must be
    non-empty; max routes the gradient to the first maximal row.
    """
    _check_pool(method)
    offsets = np.asarray(offsets, dtype=np.int64)
    lengths = np.diff(offsets)
    if lengths.size == 0 or np.any(lengths <= 0):
        raise EmptyStackError("segment_pool needs non-empty segments")
    if offsets[0] != 0 or offsets[-1] != x.shape[0]:
        raise DimensionError(f"segment offsets {offsets[[0, -1]]} do not cover {x.shape[0]} rows")
    starts = offsets[:-1]
    if method == "max":
        out = np.maximum.reduceat(x.data, starts, axis=0)
    else:
        out = np.add.reduceat(x.data, starts, axis=0)
        if method == "mean":
            out = out / lengths.reshape((-1,) + (1,) * (x.ndim - 1))

    def backward(g):
        if method == "sum":
            return (np.repeat(g, lengths, axis=0),)
        if method == "mean":
            scaled = g / lengths.reshape((-1,) + (1,) * (x.ndim - 1))
            return (np.repeat(scaled, lengths, axis=0),)
        full = np.zeros_like(x.data)
        for s, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
            block = x.data[lo:hi]
            first = block.argmax(axis=0)
            np.put_along_axis(full[lo:hi], first[None], g[s][None], axis=0)
        return (full,)

    return make_node(out, (x,), backward, f"segment_{method}")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x[b, t, :]`` over positions where ``mask[b, t]`` is 1."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=1, keepdims=True)
    weights = (m / counts)[..., None]
    out = (x.data * weights).sum(axis=1)

    def backward(g):
        return (g[:, None, :] * weights,)

    return make_node(out, (x,), backward, "masked_mean")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = x @ weight
    return y if bias is None else y + bias
