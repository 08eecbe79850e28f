"""Differentiable tensor kernels.

Every kernel computes its forward value with numpy and registers a gradient
rule through ``record_op``. Convolutions use the cross-correlation convention
(kernels are not flipped). Reductions run in numpy's fixed order, so results
do not depend on how many worker threads the caller uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bifusion_gait.autodiff import DiffTensor, as_tensor, record_op
from bifusion_gait.errors import (
    BatchSizeError,
    ConfigurationError,
    DimensionError,
    LabelIndexError,
)
from bifusion_gait.rng import Rng

Mode = Literal["train", "eval"]
PoolKind = Literal["max", "mean"]

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}.")


# Elementwise and shape kernels


def add(a: DiffTensor | float, b: DiffTensor | float) -> DiffTensor:
    left, right = as_tensor(a), as_tensor(b)
    try:
        out = left.data + right.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {left.shape} with {right.shape}.") from exc
    return record_op(
        "add",
        out,
        (left, right),
        lambda g: (_unbroadcast(g, left.shape), _unbroadcast(g, right.shape)),
    )


def sub(a: DiffTensor | float, b: DiffTensor | float) -> DiffTensor:
    left, right = as_tensor(a), as_tensor(b)
    try:
        out = left.data - right.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {left.shape} with {right.shape}.") from exc
    return record_op(
        "sub",
        out,
        (left, right),
        lambda g: (_unbroadcast(g, left.shape), _unbroadcast(-g, right.shape)),
    )


def mul(a: DiffTensor | float, b: DiffTensor | float) -> DiffTensor:
    left, right = as_tensor(a), as_tensor(b)
    try:
        out = left.data * right.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {left.shape} with {right.shape}.") from exc
    return record_op(
        "mul",
        out,
        (left, right),
        lambda g: (_unbroadcast(g * right.data, left.shape), _unbroadcast(g * left.data, right.shape)),
    )


def scale(a: DiffTensor, factor: float) -> DiffTensor:
    value = float(factor)
    return record_op("scale", a.data * value, (a,), lambda g: (g * value,))


def power(a: DiffTensor, exponent: float) -> DiffTensor:
    p = float(exponent)
    out = np.power(a.data, p)
    return record_op("power", out, (a,), lambda g: (g * p * np.power(a.data, p - 1.0),))


def absolute(a: DiffTensor) -> DiffTensor:
    """Elementwise |a|; the gradient at 0 is taken as 0."""
    return record_op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def total(a: DiffTensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> DiffTensor:
    """Sum over ``axis`` (all axes when ``None``)."""
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", out, (a,), rule)


def reshape(a: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}.") from exc
    return record_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    order = tuple(axes)
    if sorted(order) != list(range(a.data.ndim)):
        raise DimensionError(f"transpose: {order} is not a permutation of {a.data.ndim} axes.")
    inverse = tuple(np.argsort(order))
    out = np.ascontiguousarray(a.data.transpose(order))
    return record_op("transpose", out, (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    target = tuple(shape)
    try:
        out = np.broadcast_to(a.data, target).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {target}.") from exc
    return record_op("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def select(a: DiffTensor, axis: int, index: int) -> DiffTensor:
    """Take one slice along ``axis``, dropping that axis."""
    ax = axis % a.data.ndim
    if not 0 <= index < a.data.shape[ax]:
        raise DimensionError(f"select: index {index} out of range for axis {ax} of {a.shape}.")
    out = np.take(a.data, index, axis=ax)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        slicer = [slice(None)] * a.data.ndim
        slicer[ax] = index
        full[tuple(slicer)] = g
        return (full,)

    return record_op("select", out, (a,), rule)


def concat(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Join along the last axis; values of ``a`` come first."""
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading extents differ between {a.shape} and {b.shape}.")
    split = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return record_op("concat", out, (a, b), lambda g: (g[..., :split], g[..., split:]))


# Linear algebra and convolution


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects two matrices, got {a.shape} and {b.shape}.")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}.")
    out = a.data @ b.data
    return record_op("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def batched_matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """``out[i] = a[i] @ b[i]`` for stacks of matrices."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched_matmul shapes do not align: {a.shape} x {b.shape}.")
    out = np.matmul(a.data, b.data)
    return record_op(
        "batched_matmul",
        out,
        (a, b),
        lambda g: (np.matmul(g, b.data.transpose(0, 2, 1)), np.matmul(a.data.transpose(0, 2, 1), g)),
    )


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    padded = extent + 2 * pad
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}.")
    if kernel > padded:
        raise DimensionError(f"kernel extent {kernel} exceeds padded input extent {padded}.")
    if (padded - kernel) % stride != 0:
        raise DimensionError(
            f"output extent ({extent}+2*{pad}-{kernel})/{stride}+1 is not integral."
        )
    return (padded - kernel) // stride + 1


def conv2d(input: DiffTensor, kernels: DiffTensor, stride: int = 1, pad: int = 0) -> DiffTensor:
    """2D cross-correlation of ``C_in x H x W`` (or a batch of them) with ``C_out x C_in x kh x kw``."""
    single = input.data.ndim == 3
    x = input.data[None] if single else input.data
    if x.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects C x H x W input and 4D kernels, got {input.shape}, {kernels.shape}.")
    batch, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = kernels.shape
    if kernel_channels != channels:
        raise DimensionError(f"conv2d channel mismatch: input {channels}, kernels {kernel_channels}.")
    out_h = conv_output_extent(height, kh, stride, pad)
    out_w = conv_output_extent(width, kw, stride, pad)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    k = kernels.data

    out = np.zeros((batch, out_channels, out_h, out_w))
    for i in range(kh):
        for j in range(kw):
            patch = padded[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
            out += np.einsum("bchw,oc->bohw", patch, k[:, :, i, j], optimize=True)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g4 = g[None] if single else g
        grad_padded = np.zeros_like(padded)
        grad_k = np.zeros_like(k)
        for i in range(kh):
            for j in range(kw):
                window = (slice(None), slice(None), slice(i, i + stride * out_h, stride), slice(j, j + stride * out_w, stride))
                grad_k[:, :, i, j] = np.einsum("bohw,bchw->oc", g4, padded[window], optimize=True)
                grad_padded[window] += np.einsum("bohw,oc->bchw", g4, k[:, :, i, j], optimize=True)
        grad_x = grad_padded[:, :, pad : pad + height, pad : pad + width] if pad else grad_padded
        return (grad_x[0] if single else grad_x, grad_k)

    return record_op("conv2d", out[0] if single else out, (input, kernels), rule)


def conv1d_time(input: DiffTensor, weights: DiffTensor, pad: int | None = None) -> DiffTensor:
    """Per-channel temporal correlation of ``T x D`` with a ``G x D`` (or ``G x 1``) kernel."""
    if input.data.ndim != 2 or weights.data.ndim != 2:
        raise DimensionError(f"conv1d_time expects T x D input and G x D weights, got {input.shape}, {weights.shape}.")
    window = weights.shape[0]
    if window % 2 == 0:
        raise ConfigurationError(f"temporal kernel size must be odd, got {window}.")
    frames, channels = input.shape
    if weights.shape[1] not in (1, channels):
        raise DimensionError(f"conv1d_time weights {weights.shape} do not match {channels} channels.")
    zero_pad = window // 2 if pad is None else int(pad)
    padded = np.pad(input.data, ((zero_pad, zero_pad), (0, 0)))
    out_frames = conv_output_extent(frames, window, 1, zero_pad)
    w = np.broadcast_to(weights.data, (window, channels))
    windows = sliding_window_view(padded, window, axis=0)
    out = np.einsum("tdg,gd->td", windows, w, optimize=True)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_padded = np.zeros_like(padded)
        for offset in range(window):
            grad_padded[offset : offset + out_frames] += g * w[offset]
        grad_w = np.einsum("td,tdg->gd", g, windows, optimize=True)
        return (
            grad_padded[zero_pad : zero_pad + frames],
            _unbroadcast(grad_w, weights.shape),
        )

    return record_op("conv1d_time", out, (input, weights), rule)


# Normalization, activations, pooling


@dataclass
class BatchNormStats:
    """Running statistics updated in place during train-mode batch normalization."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, features: int) -> "BatchNormStats":
        return cls(running_mean=np.zeros(features), running_var=np.ones(features))


def batch_norm(
    input: DiffTensor,
    gamma: DiffTensor,
    beta: DiffTensor,
    mode: Mode,
    eps: float = BN_EPS,
    stats: BatchNormStats | None = None,
) -> DiffTensor:
    """Normalize a ``B x D`` batch per feature.

    Train mode uses batch statistics with population variance and, when
    ``stats`` is given, moves the running statistics with momentum 0.1. Eval
    mode reads the running statistics.
    """
    _check_mode(mode)
    if input.data.ndim != 2:
        raise DimensionError(f"batch_norm expects B x D input, got {input.shape}.")
    rows, features = input.shape
    if gamma.shape != (features,) or beta.shape != (features,):
        raise DimensionError(f"batch_norm gamma/beta must have shape ({features},).")
    x = input.data

    if mode == "train":
        if rows < 2:
            raise BatchSizeError(f"batch_norm needs at least 2 rows in train mode, got {rows}.")
        mean = x.mean(axis=0)
        centered = x - mean
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = centered * inv_std
        if stats is not None:
            stats.running_mean[...] = (1.0 - stats.momentum) * stats.running_mean + stats.momentum * mean
            stats.running_var[...] = (1.0 - stats.momentum) * stats.running_var + stats.momentum * var

        def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
            d_hat = g * gamma.data
            grad_x = inv_std / rows * (
                rows * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0)
            )
            return grad_x, (g * x_hat).sum(axis=0), g.sum(axis=0)

    else:
        running = stats if stats is not None else BatchNormStats.fresh(features)
        inv_std = 1.0 / np.sqrt(running.running_var + eps)
        x_hat = (x - running.running_mean) * inv_std

        def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
            return g * gamma.data * inv_std, (g * x_hat).sum(axis=0), g.sum(axis=0)

    out = x_hat * gamma.data + beta.data
    return record_op("batch_norm", out, (input, gamma, beta), rule)


def relu(input: DiffTensor) -> DiffTensor:
    mask = input.data > 0
    return record_op("relu", np.where(mask, input.data, 0.0), (input,), lambda g: (g * mask,))


def dropout(input: DiffTensor, rate: float, mode: Mode, rng: Rng | None = None) -> DiffTensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so eval mode is the identity."""
    _check_mode(mode)
    if rate < 0.0:
        raise ConfigurationError(f"dropout rate must be >= 0, got {rate}.")
    if mode == "eval" or rate == 0.0:
        return input
    if rate >= 1.0:
        raise ConfigurationError(f"dropout rate must be < 1 in train mode, got {rate}.")
    if rng is None:
        raise ConfigurationError("dropout in train mode needs an Rng.")
    keep = (rng.uniform(size=input.shape) >= rate) / (1.0 - rate)
    return record_op("dropout", input.data * keep, (input,), lambda g: (g * keep,))


def pool(input: DiffTensor, axis: int, kind: PoolKind) -> DiffTensor:
    """Reduce one axis by max (ties go to the lowest index) or mean."""
    if input.data.ndim == 0:
        raise DimensionError("pool needs at least one axis.")
    ax = axis % input.data.ndim if -input.data.ndim <= axis < input.data.ndim else None
    if ax is None:
        raise DimensionError(f"pool axis {axis} is invalid for shape {input.shape}.")
    count = input.shape[ax]
    if count == 0:
        raise DimensionError(f"pool over empty axis {ax} of {input.shape}.")

    if kind == "max":
        index = np.expand_dims(np.argmax(input.data, axis=ax), ax)
        out = np.take_along_axis(input.data, index, axis=ax).squeeze(ax)

        def rule(g: np.ndarray) -> tuple[np.ndarray]:
            grad = np.zeros_like(input.data)
            np.put_along_axis(grad, index, np.expand_dims(g, ax), axis=ax)
            return (grad,)

        return record_op("pool_max", out, (input,), rule)
    if kind == "mean":
        out = input.data.sum(axis=ax) / count
        return record_op(
            "pool_mean",
            out,
            (input,),
            lambda g: (np.broadcast_to(np.expand_dims(g, ax) / count, input.shape).copy(),),
        )
    raise ConfigurationError(f"pool kind must be 'max' or 'mean', got {kind!r}.")


# Losses


def softmax_cross_entropy(logits: DiffTensor, labels: Sequence[int] | np.ndarray) -> DiffTensor:
    """Mean over the batch of ``-log softmax(logits)[label]``, stabilized by max subtraction."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects B x C logits, got {logits.shape}.")
    rows, classes = logits.shape
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    if targets.shape[0] != rows:
        raise DimensionError(f"{targets.shape[0]} labels for {rows} logit rows.")
    if rows == 0:
        raise DimensionError("softmax_cross_entropy needs at least one logit row.")
    if targets.min() < 0 or targets.max() >= classes:
        raise LabelIndexError(f"labels must lie in [0, {classes}), got range [{targets.min()}, {targets.max()}].")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(rows), targets]
    out = np.asarray((log_norm - picked).sum() / rows)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[np.arange(rows), targets] -= 1.0
        return (probs * (float(g) / rows),)

    return record_op("softmax_cross_entropy", out, (logits,), rule)


# Composite helpers


def linear(x: DiffTensor, weight: DiffTensor, bias: DiffTensor | None = None) -> DiffTensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def square_sum(x: DiffTensor) -> DiffTensor:
    return total(mul(x, x))
