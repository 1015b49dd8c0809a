"""Layer primitives for the 1-D CNN verifier.

Every operation is a pure function: it takes float64 arrays, returns a new
output array plus a cache object, and never mutates its inputs.  Each cache
holds exactly the forward intermediates its ``*_backward`` counterpart needs
to produce gradients of the same shapes as the corresponding inputs.

Conventions:
  * activations are ``(N, C, L)`` = (batch, channels, length), row-major;
  * convolution is cross-correlation (no kernel flip), the standard
    deep-learning convention;
  * all arithmetic is in 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "conv1d",
    "conv1d_backward",
    "conv1d_output_length",
    "batchnorm1d",
    "batchnorm1d_backward",
    "relu",
    "relu_backward",
    "maxpool1d",
    "maxpool1d_backward",
    "linear",
    "linear_backward",
    "softmax",
    "softmax_crossentropy",
]

# Floor for log arguments; keeps -log(p) finite for p underflowing to 0.
_LOG_FLOOR = 1e-300

# im2col buffer budget in float64 values (~128 MB); batches are processed in
# chunks no larger than this so convolution is one big GEMM per chunk
_COL_BUDGET = 16 * 2**20


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _col_chunks(xp: np.ndarray, kernel: int, stride: int, out_len: int):
    """Yield (lo, hi, col) im2col blocks of ``xp (N, C, Lp)``.

    ``col`` has shape (hi - lo, C * kernel, out_len); the copy it forces is
    what keeps peak memory at the budget instead of a full batch expansion.
    """
    n, channels, _ = xp.shape
    per_sample = max(1, channels * kernel * out_len)
    chunk = max(1, min(n, _COL_BUDGET // per_sample))
    s0, s1, s2 = xp.strides
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        windows = np.lib.stride_tricks.as_strided(
            xp[lo:hi],
            shape=(hi - lo, channels, kernel, out_len),
            strides=(s0, s1, s2, s2 * stride),
        )
        yield lo, hi, windows.reshape(hi - lo, channels * kernel, out_len)


def conv1d_output_length(length: int, kernel: int, stride: int, pad: int) -> int:
    """Output length of a 1-D cross-correlation: floor((L + 2p - k)/s) + 1."""
    return (length + 2 * pad - kernel) // stride + 1


@dataclass
class Conv1dCache:
    padded_input: np.ndarray  # (N, C_in, L + 2*pad)
    weight: np.ndarray
    stride: int
    pad: int
    input_length: int


def conv1d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> tuple[np.ndarray, Conv1dCache]:
    """Cross-correlate ``x (N, C_in, L)`` with ``weight (C_out, C_in, k)``.

    out[n, j, t] = bias[j] + sum_{i, tau} weight[j, i, tau] * xp[n, i, t*stride + tau]

    where ``xp`` is ``x`` zero-padded by ``pad`` on both ends of the length
    axis.  Raises ``ValueError`` on channel mismatch or when the output would
    be empty.
    """
    x = _as_f64(x)
    weight = _as_f64(weight)
    bias = _as_f64(bias)
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d expects 3-d input and weight, got {x.shape} and {weight.shape}")
    n, c_in, length = x.shape
    c_out, w_c_in, kernel = weight.shape
    if w_c_in != c_in:
        raise ValueError(f"input has {c_in} channels but weight expects {w_c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} or pad={pad}")
    out_len = conv1d_output_length(length, kernel, stride, pad)
    if kernel > length + 2 * pad or out_len < 1:
        raise ValueError(
            f"kernel {kernel} with pad {pad}, stride {stride} yields no output for length {length}"
        )

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad > 0 else x
    out = np.empty((n, c_out, out_len))
    w2 = weight.reshape(c_out, c_in * kernel)
    for lo, hi, col in _col_chunks(xp, kernel, stride, out_len):
        out[lo:hi] = np.matmul(w2, col)
    out += bias[None, :, None]
    return out, Conv1dCache(xp, weight, stride, pad, length)


def conv1d_backward(
    cache: Conv1dCache, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv1d w.r.t. (input, weight, bias) given dL/dout."""
    grad_out = _as_f64(grad_out)
    xp, weight = cache.padded_input, cache.weight
    stride, pad = cache.stride, cache.pad
    c_out, c_in, kernel = weight.shape
    out_len = grad_out.shape[2]

    grad_bias = grad_out.sum(axis=(0, 2))
    grad_w2 = np.zeros((c_out, c_in * kernel))
    grad_xp = np.zeros_like(xp)
    w2 = weight.reshape(c_out, c_in * kernel)
    for lo, hi, col in _col_chunks(xp, kernel, stride, out_len):
        g = grad_out[lo:hi]
        grad_w2 += np.tensordot(g, col, axes=((0, 2), (0, 2)))
        # scatter the column gradient back onto the (overlapping) windows
        col_grad = np.matmul(w2.T, g).reshape(hi - lo, c_in, kernel, out_len)
        gx = grad_xp[lo:hi]
        for tau in range(kernel):
            sl = slice(tau, tau + stride * (out_len - 1) + 1, stride)
            gx[:, :, sl] += col_grad[:, :, tau, :]
    grad_weight = grad_w2.reshape(c_out, c_in, kernel)
    grad_x = grad_xp[:, :, pad : pad + cache.input_length] if pad > 0 else grad_xp
    return grad_x, grad_weight, grad_bias


@dataclass
class BatchNorm1dCache:
    x_hat: np.ndarray | None  # normalized input, train mode only
    inv_std: np.ndarray | None  # (C,), train mode only
    gamma: np.ndarray
    train: bool
    new_running_mean: np.ndarray
    new_running_var: np.ndarray


def batchnorm1d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> tuple[np.ndarray, BatchNorm1dCache]:
    """Per-channel batch normalization over the (N, L) axes of ``x (N, C, L)``.

    Train mode normalizes with the batch mean and population (biased)
    variance, then applies ``gamma * x_hat + beta``, and computes updated
    running statistics ``(1 - momentum) * old + momentum * batch`` which are
    returned on the cache rather than written in place.  Eval mode normalizes
    with the running statistics and leaves them untouched.
    """
    x = _as_f64(x)
    gamma = _as_f64(gamma)
    beta = _as_f64(beta)
    running_mean = _as_f64(running_mean)
    running_var = _as_f64(running_var)
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ValueError(f"{name} shape {arr.shape} does not match {c} channels")

    if train:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))  # population variance
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean[None, :, None]) * inv_std[None, :, None]
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var
        out = gamma[None, :, None] * x_hat + beta[None, :, None]
        return out, BatchNorm1dCache(x_hat, inv_std, gamma, True, new_mean, new_var)

    inv_std = 1.0 / np.sqrt(running_var + eps)
    x_hat = (x - running_mean[None, :, None]) * inv_std[None, :, None]
    out = gamma[None, :, None] * x_hat + beta[None, :, None]
    return out, BatchNorm1dCache(None, None, gamma, False, running_mean, running_var)


def batchnorm1d_backward(
    cache: BatchNorm1dCache, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of train-mode batchnorm w.r.t. (input, gamma, beta)."""
    if not cache.train:
        raise ValueError("backward through an eval-mode batchnorm cache is not supported")
    grad_out = _as_f64(grad_out)
    x_hat, inv_std, gamma = cache.x_hat, cache.inv_std, cache.gamma
    m = x_hat.shape[0] * x_hat.shape[2]  # statistics count per channel

    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2))
    grad_beta = grad_out.sum(axis=(0, 2))
    g_hat = grad_out * gamma[None, :, None]
    sum_g = g_hat.sum(axis=(0, 2), keepdims=True)
    sum_gx = (g_hat * x_hat).sum(axis=(0, 2), keepdims=True)
    grad_x = (inv_std[None, :, None] / m) * (m * g_hat - sum_g - x_hat * sum_gx)
    return grad_x, grad_gamma, grad_beta


@dataclass
class ReluCache:
    positive: np.ndarray  # boolean mask x > 0


def relu(x: np.ndarray) -> tuple[np.ndarray, ReluCache]:
    """Elementwise max(0, x); identical to (x + |x|) / 2."""
    x = _as_f64(x)
    return np.maximum(x, 0.0), ReluCache(x > 0)


def relu_backward(cache: ReluCache, grad_out: np.ndarray) -> np.ndarray:
    return _as_f64(grad_out) * cache.positive


@dataclass
class MaxPool1dCache:
    argmax_pos: np.ndarray  # (N, C, L'), positions in the padded input
    padded_length: int
    pad: int
    input_length: int


def maxpool1d(
    x: np.ndarray, window: int, stride: int, pad: int = 0
) -> tuple[np.ndarray, MaxPool1dCache]:
    """Max over sliding windows of ``x (N, C, L)``; padding counts as -inf.

    L' = floor((L + 2*pad - window)/stride) + 1.  The cache records each
    output's argmax position so the backward pass can route gradients.
    """
    x = _as_f64(x)
    if x.ndim != 3:
        raise ValueError(f"maxpool1d expects (N, C, L) input, got {x.shape}")
    n, c, length = x.shape
    if window < 1 or stride < 1 or pad < 0:
        raise ValueError(f"invalid window={window}, stride={stride}, pad={pad}")
    if pad >= window:
        # a window of pure padding would select -inf
        raise ValueError(f"pad {pad} must be smaller than window {window}")
    out_len = conv1d_output_length(length, window, stride, pad)
    if window > length + 2 * pad or out_len < 1:
        raise ValueError(f"window {window} with pad {pad} yields no output for length {length}")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)), constant_values=-np.inf) if pad > 0 else x
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, out_len, window), strides=(s0, s1, s2 * stride, s2)
    )
    out = windows.max(axis=3)
    pos = windows.argmax(axis=3) + stride * np.arange(out_len)[None, None, :]
    return out, MaxPool1dCache(pos, xp.shape[2], pad, length)


def maxpool1d_backward(cache: MaxPool1dCache, grad_out: np.ndarray) -> np.ndarray:
    """Scatter each output gradient to its argmax input position."""
    grad_out = _as_f64(grad_out)
    n, c, out_len = grad_out.shape
    grad_xp = np.zeros((n, c, cache.padded_length))
    n_idx = np.arange(n)[:, None, None]
    c_idx = np.arange(c)[None, :, None]
    np.add.at(grad_xp, (n_idx, c_idx, cache.argmax_pos), grad_out)
    pad = cache.pad
    return grad_xp[:, :, pad : pad + cache.input_length] if pad > 0 else grad_xp


@dataclass
class LinearCache:
    x: np.ndarray
    weight: np.ndarray


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, LinearCache]:
    """Affine map ``y = x @ weight + bias`` for ``x (N, D)``, ``weight (D, M)``."""
    x = _as_f64(x)
    weight = _as_f64(weight)
    bias = _as_f64(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shapes incompatible: x {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    return x @ weight + bias, LinearCache(x, weight)


def linear_backward(
    cache: LinearCache, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_out = _as_f64(grad_out)
    grad_x = grad_out @ cache.weight.T
    grad_weight = cache.x.T @ grad_out
    grad_bias = grad_out.sum(axis=0)
    return grad_x, grad_weight, grad_bias


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    logits = _as_f64(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_crossentropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over two-class logits, with its logit gradient.

    Class order is fixed: column 0 = forged, column 1 = genuine.  Returns
    ``(loss, grad_logits, prob_genuine)`` where ``loss`` is the mean of
    ``-log p[label]``, ``grad_logits`` rows are ``(p - onehot(label)) / N``,
    and ``prob_genuine`` is the softmax probability of column 1 (the
    verification score).
    """
    logits = _as_f64(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"expected (N, 2) logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (forged) or 1 (genuine)")

    n = logits.shape[0]
    probs = softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, _LOG_FLOOR)).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad, probs[:, 1]
