"""Differentiable operations: exactly the set M5 needs, plus add/mul/sum."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# When set, relu and maxpool1d append their branch choices (sign masks,
# argmax indices) here; gradient checks use this to detect kink crossings.
_branch_log: list | None = None


@contextmanager
def record_branches():
    """Collect the piecewise-linear branch decisions made inside the block."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return Tensor.from_op(x.data.sum(), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation. ``x`` [B,Cin,L], ``weight`` [Cout,Cin,K] -> [B,Cout,Lout]."""
    if x.ndim != 3 or weight.ndim != 3 or bias.ndim != 1:
        raise ValueError(
            f"conv1d: expected input [B,Cin,L], weight [Cout,Cin,K], bias [Cout]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    B, cin, L = x.shape
    cout, wcin, K = weight.shape
    if wcin != cin or bias.shape[0] != cout:
        raise ValueError(f"conv1d: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}")
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    if L < K:
        raise ValueError(f"conv1d: input length {L} shorter than kernel {K} (input {x.shape}, weight {weight.shape})")
    lout = (L - K) // stride + 1

    # cols[b*lout + l, c*K + k] = x[b, c, l*stride + k]; 2-D GEMMs are far
    # faster than numpy's batched matmul for these shapes
    cols = sliding_window_view(x.data, K, axis=2)[:, :, : (lout - 1) * stride + 1 : stride, :]
    cols = cols.transpose(0, 2, 1, 3).reshape(B * lout, cin * K)
    w2 = weight.data.reshape(cout, cin * K)
    out = (cols @ w2.T + bias.data).reshape(B, lout, cout).transpose(0, 2, 1)

    def backward(g):
        gt = g.transpose(0, 2, 1).reshape(B * lout, cout)
        gw = (gt.T @ cols).reshape(cout, cin, K)
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = (gt @ w2).reshape(B, lout, cin, K).transpose(0, 2, 1, 3)
            gx = np.zeros_like(x.data)
            span = (lout - 1) * stride + 1
            for k in range(K):
                gx[:, :, k : k + span : stride] += gcols[:, :, :, k]
        return gx, gw, gb

    return Tensor.from_op(np.ascontiguousarray(out), (x, weight, bias), backward)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization of ``x`` [B,C,L] over (B, L).

    Train mode uses batch statistics and updates ``state`` (momentum 0.1,
    unbiased variance for the running estimate).  Eval mode uses the running
    statistics, which start at mean 0 / var 1.
    """
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batchnorm1d: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}")
    B, C, L = x.shape
    g_ = gamma.data[None, :, None]
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + BN_EPS)
        xhat = (x.data - state.running_mean.astype(x.dtype)[None, :, None]) * inv_std[None, :, None]
        out = g_ * xhat + beta.data[None, :, None]

        def backward_eval(g):
            return (
                g * g_ * inv_std[None, :, None],
                (g * xhat).sum(axis=(0, 2)),
                g.sum(axis=(0, 2)),
            )

        return Tensor.from_op(out, (x, gamma, beta), backward_eval)
    if mode != "train":
        raise ValueError(f"batchnorm1d: mode must be 'train' or 'eval', got {mode!r}")
    n = B * L
    if n < 2:
        raise ValueError(f"batchnorm1d: train mode needs at least 2 values per channel, got input {x.shape}")

    mean = x.data.mean(axis=(0, 2))
    centered = x.data - mean[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centered * inv_std[None, :, None]
    out = g_ * xhat + beta.data[None, :, None]

    m = BN_MOMENTUM
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))

    def backward(g):
        gxhat = g * g_
        s1 = gxhat.mean(axis=(0, 2))[None, :, None]
        s2 = (gxhat * xhat).mean(axis=(0, 2))[None, :, None]
        gx = inv_std[None, :, None] * (gxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return Tensor.from_op(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(mask)
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def maxpool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling (stride = window); a trailing remainder is dropped.

    The gradient goes to the first maximal element of each window.
    """
    if x.ndim != 3:
        raise ValueError(f"maxpool1d: expected [B,C,L], got {x.shape}")
    B, C, L = x.shape
    if window < 1 or L < window:
        raise ValueError(f"maxpool1d: window {window} invalid for input {x.shape}")
    lout = L // window
    blocks = x.data[:, :, : lout * window].reshape(B, C, lout, window)
    idx = blocks.argmax(axis=3)
    if _branch_log is not None:
        _branch_log.append(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gblocks = np.zeros((B, C, lout, window), dtype=g.dtype)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, :, : lout * window] = gblocks.reshape(B, C, lout * window)
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the time axis: [B,C,L] -> [B,C]."""
    if x.ndim != 3:
        raise ValueError(f"global_avg_pool: expected [B,C,L], got {x.shape}")
    L = x.shape[2]
    return Tensor.from_op(
        x.data.mean(axis=2),
        (x,),
        lambda g: (np.repeat(g[:, :, None] / L, L, axis=2).astype(x.dtype),),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x`` [B,F] @ ``weight``.T [F,O] + ``bias`` [O]."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return Tensor.from_op(out, (x, weight, bias), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, n_classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"softmax_cross_entropy: labels must lie in 0..{n_classes - 1}, got {labels.tolist()}")
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / B),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
