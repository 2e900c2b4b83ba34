"""Differentiable tensor operations with reverse-mode gradients.

A small float64 autodiff layer: every operation computes its value eagerly
and, when handed a Tape, records a node whose closure maps the output
gradient back to input gradients.  backward() walks the tape in reverse and
accumulates into Tensor.grad, which the SGD stepper consumes.

The operation set is exactly what the inverse models need: dense affine
maps, 1D cross-correlation (stride / zero padding / channel groups), batch
normalization with running statistics, ReLU, parameterless piecewise-linear
resampling, elementwise residual addition, reshaping, and a mean-squared
loss.  Everything runs on contiguous float64 arrays; forward passes are
deterministic for fixed inputs and parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeMismatch", "DegenerateBatch", "GraphNotRecorded",
    "Tensor", "Tape", "ParamStore", "RunningStats",
    "affine", "conv1d", "conv1d_output_length", "batchnorm1d", "relu",
    "resample_linear", "add", "reshape", "mse",
    "backward", "sgd_step", "uniform_init",
]


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class DegenerateBatch(ValueError):
    """Batch statistics requested for a batch of fewer than 2 rows."""


class GraphNotRecorded(RuntimeError):
    """backward() was called without a recorded forward pass."""


class Tensor:
    """A float64 array with an optional accumulated gradient."""

    __slots__ = ("values", "grad")

    def __init__(self, values) -> None:
        v = np.asarray(values, dtype=np.float64)
        if v.ndim and not v.flags["C_CONTIGUOUS"]:
            v = np.ascontiguousarray(v)
        self.values = v
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape})"


class Tape:
    """Recorded forward pass: a list of (output, inputs, pullback) nodes.

    The pullback takes the output gradient and returns one gradient (or
    None) per input, in order.
    """

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def record(self, output: Tensor, inputs: tuple[Tensor, ...],
               pullback) -> None:
        self.nodes.append((output, inputs, pullback))

    def clear(self) -> None:
        self.nodes.clear()


@dataclass
class RunningStats:
    """Running mean/variance of a normalization layer (eval-mode stats)."""

    mean: np.ndarray
    var: np.ndarray


class ParamStore:
    """Named parameter tensors plus per-layer running statistics.

    Parameters are created through tensor() so that training, checkpointing
    and parameter counting all see the same registry.  Gradients live on
    the tensors themselves; running statistics are mutable arrays updated
    by train-mode batch normalization.
    """

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}

    def tensor(self, name: str, values) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(values)
        self.params[name] = t
        return t

    def running_stats(self, name: str, channels: int) -> RunningStats:
        if name in self.stats:
            raise ValueError(f"duplicate statistics name {name!r}")
        st = RunningStats(mean=np.zeros(channels), var=np.ones(channels))
        self.stats[name] = st
        return st

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return math.sqrt(total)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled uniform draw on +-sqrt(1/fan_in)."""
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# operations


def affine(x: Tensor, weight: Tensor, bias: Tensor,
           tape: Tape | None = None) -> Tensor:
    """Dense map out = x . weight^T + bias for x of shape (B, F_in)."""
    xv, wv, bv = x.values, weight.values, bias.values
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeMismatch(
            f"affine: input {xv.shape} vs weight {wv.shape}")
    if bv.shape != (wv.shape[0],):
        raise ShapeMismatch(f"affine: bias {bv.shape} vs weight {wv.shape}")
    out = Tensor(xv @ wv.T + bv)
    if tape is not None:
        def pullback(dy):
            return dy @ wv, dy.T @ xv, dy.sum(axis=0)
        tape.record(out, (x, weight, bias), pullback)
    return out


def conv1d_output_length(l_in: int, kernel: int, stride: int,
                         padding: int) -> int:
    return (l_in + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1,
           tape: Tape | None = None) -> Tensor:
    """1D cross-correlation of (B, C_in, L) with (C_out, C_in/groups, K).

    Channel groups restrict mixing: output channel block g reads only input
    channel block g.  groups == C_in with one channel per group is a
    depthwise convolution.
    """
    xv, kv = x.values, kernel.values
    if xv.ndim != 3 or kv.ndim != 3:
        raise ShapeMismatch("conv1d expects (B,C,L) input and (O,I,K) kernel")
    b, c_in, l_in = xv.shape
    c_out, c_in_g, k = kv.shape
    if c_in % groups or c_out % groups or c_in // groups != c_in_g:
        raise ShapeMismatch(
            f"conv1d: {c_in} channels, kernel {kv.shape}, groups {groups}")
    l_out = conv1d_output_length(l_in, k, stride, padding)
    if l_out < 1:
        raise ShapeMismatch("conv1d: empty output")
    if bias is not None and bias.values.shape != (c_out,):
        raise ShapeMismatch("conv1d: bias must have one entry per channel")

    xp = xv if padding == 0 else np.pad(
        xv, ((0, 0), (0, 0), (padding, padding)))
    # windows[b, c, j, t] = xp[b, c, j*stride + t]
    windows = np.lib.stride_tricks.sliding_window_view(
        xp, k, axis=2)[:, :, ::stride, :]
    wg = windows.reshape(b, groups, c_in_g, l_out, k)
    kg = kv.reshape(groups, c_out // groups, c_in_g, k)
    out_v = np.einsum("bgijt,goit->bgoj", wg, kg, optimize=True)
    out_v = np.ascontiguousarray(out_v.reshape(b, c_out, l_out))
    if bias is not None:
        out_v += bias.values[:, None]
    out = Tensor(out_v)

    if tape is not None:
        lp = xp.shape[2]

        def pullback(dy):
            dyg = dy.reshape(b, groups, c_out // groups, l_out)
            dk = np.einsum("bgijt,bgoj->goit", wg, dyg, optimize=True)
            dwin = np.einsum("goit,bgoj->bgijt", kg, dyg, optimize=True)
            dwin = dwin.reshape(b, c_in, l_out, k)
            dxp = np.zeros((b, c_in, lp))
            for t in range(k):
                dxp[:, :, t:t + stride * l_out:stride] += dwin[:, :, :, t]
            dx = dxp if padding == 0 else dxp[:, :, padding:lp - padding]
            grads = [dx, dk.reshape(c_out, c_in_g, k)]
            if bias is not None:
                grads.append(dy.sum(axis=(0, 2)))
            return grads

        inputs = (x, kernel) if bias is None else (x, kernel, bias)
        tape.record(out, inputs, pullback)
    return out


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                mode: str = "train", eps: float = 1e-5,
                momentum: float = 0.1, tape: Tape | None = None) -> Tensor:
    """Per-channel batch normalization with affine rescale.

    Input is (B, C, L) (statistics over batch and length) or (B, C)
    (statistics over the batch).  Train mode normalizes by the batch
    moments and folds them into the running statistics with the given
    momentum (variance stored in its unbiased form); eval mode uses the
    stored running statistics.
    """
    xv = x.values
    if xv.ndim not in (2, 3):
        raise ShapeMismatch("batchnorm1d expects (B,C) or (B,C,L) input")
    c = xv.shape[1]
    if gamma.values.shape != (c,) or beta.values.shape != (c,):
        raise ShapeMismatch("batchnorm1d: gamma/beta must be (channels,)")
    axes = (0,) if xv.ndim == 2 else (0, 2)
    expand = (slice(None),) if xv.ndim == 2 else (slice(None), None)
    gv = gamma.values[(None,) + expand]
    bv = beta.values[(None,) + expand]

    if mode == "train":
        if xv.shape[0] < 2:
            raise DegenerateBatch("train-mode batch normalization needs "
                                  "at least 2 rows")
        m = xv.shape[0] if xv.ndim == 2 else xv.shape[0] * xv.shape[2]
        mu = xv.mean(axis=axes)
        centered = xv - mu[(None,) + expand]
        var = np.mean(centered * centered, axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv[(None,) + expand]
        stats.mean += momentum * (mu - stats.mean)
        unbiased = var * (m / (m - 1.0))
        stats.var += momentum * (unbiased - stats.var)
        out = Tensor(gv * xhat + bv)
        if tape is not None:
            inv_e = inv[(None,) + expand]

            def pullback(dy):
                dxhat = dy * gv
                # chain rule through mu and var of the same batch
                dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                      - xhat * np.mean(dxhat * xhat, axis=axes,
                                       keepdims=True)) * inv_e
                return dx, np.sum(dy * xhat, axis=axes), np.sum(dy, axis=axes)

            tape.record(out, (x, gamma, beta), pullback)
        return out

    if mode != "eval":
        raise ValueError("mode must be 'train' or 'eval'")
    inv = 1.0 / np.sqrt(stats.var + eps)
    xhat = (xv - stats.mean[(None,) + expand]) * inv[(None,) + expand]
    out = Tensor(gv * xhat + bv)
    if tape is not None:
        inv_e = inv[(None,) + expand]

        def pullback(dy):
            return (dy * gv * inv_e, np.sum(dy * xhat, axis=axes),
                    np.sum(dy, axis=axes))

        tape.record(out, (x, gamma, beta), pullback)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """max(0, x) elementwise; subgradient 0 at 0."""
    out = Tensor(np.maximum(x.values, 0.0))
    if tape is not None:
        mask = x.values > 0.0

        def pullback(dy):
            return (dy * mask,)

        tape.record(out, (x,), pullback)
    return out


def _resample_weights(l_in: int, l_out: int):
    t = np.linspace(0.0, l_in - 1.0, l_out)
    i0 = np.minimum(t.astype(np.int64), l_in - 2)
    w = t - i0
    return i0, w


def resample_linear(x: Tensor, l_out: int, tape: Tape | None = None,
                    ) -> Tensor:
    """Piecewise-linear resampling of the last axis with aligned endpoints.

    Sample j reads position j*(L_in-1)/(L_out-1); the map is linear in the
    input, so the backward pass is its exact transpose.
    """
    xv = x.values
    l_in = xv.shape[-1]
    if l_in < 2 or l_out < 2:
        raise ShapeMismatch("resample_linear needs at least 2 points")
    i0, w = _resample_weights(l_in, l_out)
    out = Tensor(xv[..., i0] * (1.0 - w) + xv[..., i0 + 1] * w)
    if tape is not None:
        def pullback(dy):
            dx = np.zeros_like(xv)
            np.add.at(dx, (..., i0), dy * (1.0 - w))
            np.add.at(dx, (..., i0 + 1), dy * w)
            return (dx,)

        tape.record(out, (x,), pullback)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise sum of two equally shaped tensors (residual join)."""
    if a.values.shape != b.values.shape:
        raise ShapeMismatch(f"add: {a.values.shape} vs {b.values.shape}")
    out = Tensor(a.values + b.values)
    if tape is not None:
        def pullback(dy):
            return dy, dy

        tape.record(out, (a, b), pullback)
    return out


def reshape(x: Tensor, shape, tape: Tape | None = None) -> Tensor:
    """View the values under a new shape of equal size."""
    old = x.values.shape
    out = Tensor(x.values.reshape(shape))
    if tape is not None:
        def pullback(dy):
            return (dy.reshape(old),)

        tape.record(out, (x,), pullback)
    return out


def mse(pred: Tensor, target: np.ndarray, tape: Tape | None = None,
        ) -> Tensor:
    """Mean of squared entrywise differences, as a scalar tensor."""
    tv = np.asarray(target, dtype=np.float64)
    if tv.shape != pred.values.shape:
        raise ShapeMismatch(f"mse: {pred.values.shape} vs {tv.shape}")
    diff = pred.values - tv
    out = Tensor(np.mean(diff * diff))
    if tape is not None:
        def pullback(dy):
            return (dy * (2.0 / diff.size) * diff,)

        tape.record(out, (pred,), pullback)
    return out


# ---------------------------------------------------------------------------
# reverse pass and optimizer


def backward(tape: Tape | None, loss: Tensor) -> None:
    """Reverse-mode sweep: accumulate d loss / d tensor into Tensor.grad.

    The loss must be an output recorded on the tape; gradients add up, so
    call ParamStore.zero_grad() between steps.
    """
    if tape is None or not tape.nodes:
        raise GraphNotRecorded("no forward pass has been recorded")
    if not any(out is loss for out, _, _ in tape.nodes):
        raise GraphNotRecorded("loss was not produced by the recorded graph")
    loss.grad = np.ones_like(loss.values)
    for out, inputs, pullback in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = pullback(out.grad)
        for tensor, grad in zip(inputs, grads):
            if grad is None:
                continue
            # accumulation always builds a new array, so pullbacks may
            # alias their output gradient (e.g. add passes dy through)
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def sgd_step(store: ParamStore, lr: float, weight_decay: float = 0.0,
             clip_norm: float | None = None) -> None:
    """One SGD step: optional global-norm clipping, then
    w <- w - lr (g + weight_decay w).

    Clipping rescales every gradient by clip_norm / |g| when the global
    norm exceeds clip_norm.  Parameters without a gradient are skipped.
    """
    scale = 1.0
    if clip_norm is not None:
        norm = store.grad_norm()
        if norm > clip_norm:
            scale = clip_norm / norm
    for t in store.params.values():
        if t.grad is None:
            continue
        t.values -= lr * (scale * t.grad + weight_decay * t.values)
