"""CNN building blocks: conv2d, batchnorm, activations, pooling, FC, loss.

conv2d accumulates kernel positions in a fixed sequential order (vectorized
over batch, output channel and spatial dims). Two consequences this package
relies on:

  * a naive scalar-loop convolution that adds terms in the same
    (in_channel, ki, kj) order produces bit-identical float32 results, so
    test oracles can compare exactly instead of within a tolerance;
  * each (sample, output channel) map is computed independently of every
    other one, so computing a channel subset gives bit-identical values to
    slicing the full output. The gate-masking equivalence checks depend on
    this.

BLAS is only used in backward passes, where gradients are checked against
finite differences rather than bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gaternet.tensor import Array, Tensor, apply_op, sqrt, _stable_sigmoid


@dataclass
class Conv2dParams:
    """Filters [out_ch, in_ch, kh, kw], optional bias [out_ch]."""

    filters: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.filters.ndim != 4:
            raise ValueError(f"filters must be 4-D, got shape {self.filters.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.filters.shape[0]

    @property
    def in_channels(self) -> int:
        return self.filters.shape[1]


@dataclass
class BatchNormParams:
    """Per-channel scale and shift plus running statistics.

    gamma and beta are trainable; running_mean and running_var are plain
    arrays updated in place by an exponential moving average with the given
    momentum (running <- momentum * running + (1 - momentum) * batch).
    Batch variance is the biased (1/m) estimate, both for normalization and
    for the running average.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Array
    running_var: Array
    momentum: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        n = self.gamma.shape[0]
        for name, v in (("beta", self.beta.data), ("running_mean", self.running_mean),
                        ("running_var", self.running_var)):
            if v.shape != (n,):
                raise ValueError(f"{name} shape {v.shape} does not match gamma ({n},)")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-D convolution (cross-correlation) over [N, C, H, W] input."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D, got shape {x.shape}")
    n, c_in, h, w = x.shape
    c_out, c_in_f, kh, kw = p.filters.shape
    if c_in != c_in_f:
        raise ValueError(
            f"conv2d channel mismatch: input has {c_in} channels, "
            f"filters expect {c_in_f}"
        )
    s, pad = p.stride, p.padding
    oh = (h + 2 * pad - kh) // s + 1
    ow = (w + 2 * pad - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {s}, padding {pad}"
        )

    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wdat = p.filters.data

    out = np.zeros((n, c_out, oh, ow), dtype=x.dtype)
    tmp = np.empty_like(out)
    # Fixed accumulation order (ic, ki, kj); see module docstring.
    for ic in range(c_in):
        for ki in range(kh):
            for kj in range(kw):
                window = xp[:, ic, ki : ki + s * oh : s, kj : kj + s * ow : s]
                np.multiply(
                    wdat[:, ic, ki, kj].reshape(1, c_out, 1, 1),
                    window[:, None, :, :],
                    out=tmp,
                )
                out += tmp
    if p.bias is not None:
        out += p.bias.data.reshape(1, c_out, 1, 1)

    parents = (x, p.filters) if p.bias is None else (x, p.filters, p.bias)

    def backward(g: Array) -> None:
        g_flat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        patches = _extract_patches(x.data, kh, kw, s, pad, oh, ow)
        if p.filters.requires_grad:
            dw = g_flat.T @ patches
            p.filters._accumulate(dw.reshape(c_out, c_in, kh, kw))
        if x.requires_grad:
            dpatch = (g_flat @ wdat.reshape(c_out, -1)).reshape(
                n, oh, ow, c_in, kh, kw
            )
            dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += (
                        dpatch[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                    )
            x._accumulate(
                dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            )
        if p.bias is not None and p.bias.requires_grad:
            p.bias._accumulate(g.sum(axis=(0, 2, 3)))

    return apply_op(out, parents, backward)


def _extract_patches(
    x: Array, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int
) -> Array:
    """im2col: [N, C, H, W] -> [N*oh*ow, C*kh*kw], minor order (c, ki, kj)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(-1, x.shape[1] * kh * kw)


def batchnorm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Normalize per channel; 4-D inputs use (N, H, W) stats, 2-D use N.

    Training mode normalizes with batch statistics (gradients flow through
    them) and updates the running averages as a side effect. Eval mode uses
    the stored running statistics and has no side effects.
    """
    if x.ndim == 4:
        axes = (0, 2, 3)
        pshape = (1, p.channels, 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        pshape = (1, p.channels)
    else:
        raise ValueError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    if x.shape[1] != p.channels:
        raise ValueError(
            f"batchnorm channel mismatch: input has {x.shape[1]}, params have "
            f"{p.channels}"
        )
    gamma = p.gamma.reshape(pshape)
    beta = p.beta.reshape(pshape)

    if training:
        mu = x.mean(axis=axes, keepdims=True)
        diff = x - mu
        var = (diff * diff).mean(axis=axes, keepdims=True)
        xhat = diff / sqrt(var + p.eps)
        out = gamma * xhat + beta

        m = p.momentum
        batch_mean = x.data.mean(axis=axes)
        batch_var = ((x.data - batch_mean.reshape(pshape)) ** 2).mean(axis=axes)
        p.running_mean[...] = m * p.running_mean + (1.0 - m) * batch_mean
        p.running_var[...] = m * p.running_var + (1.0 - m) * batch_var
        return out

    rm = Tensor(p.running_mean.reshape(pshape).astype(x.dtype, copy=False))
    denom = Tensor(
        np.sqrt(p.running_var.reshape(pshape).astype(x.dtype, copy=False) + p.eps)
    )
    xhat = (x - rm) / denom
    return gamma * xhat + beta


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: Array) -> None:
        x._accumulate(g * mask)

    return apply_op(np.maximum(x.data, 0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out_data = _stable_sigmoid(x.data)

    def backward(g: Array) -> None:
        x._accumulate(g * out_data * (1.0 - out_data))

    return apply_op(out_data, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C], mean over the spatial dims."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3))


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide evenly."""
    if x.ndim != 4:
        raise ValueError(f"avg_pool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if h % window or w % window:
        raise ValueError(
            f"avg_pool2d window {window} does not divide spatial dims {h}x{w}"
        )
    return x.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x [N, d] @ weight [d, k] + bias [k]."""
    return x @ weight + bias


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy from raw logits [N, K] and integer labels [N]."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    n, k = logits.shape
    if n < 1:
        raise ValueError("softmax_cross_entropy needs at least one sample")
    if labels.shape != (n,):
        raise ValueError(
            f"labels shape {labels.shape} does not match logits batch {n}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(
            f"label out of range: values must be in [0, {k}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean(dtype=logits.dtype)

    def backward(g: Array) -> None:
        grad = ez / se
        grad[rows, labels] -= 1.0
        logits._accumulate(g * grad / n)

    return apply_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
