"""Forward and backward kernels for the layer types of the video network.

Every forward returns ``(out, cache)``. The matching ``*_backward`` takes the
upstream gradient and that cache. Convolutions and pooling act on each frame
``(n, t)`` separately. Nothing here mixes information across frames.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _frame_windows(x, k, stride, pad, fill=0.0):
    # (N, C, T, H, W) -> view of shape (C, N, T, Ho, Wo, k, k)
    xc = x.transpose(1, 0, 2, 3, 4)
    if pad:
        # one copy does both the transpose and the padding
        C, N, T, H, W = xc.shape
        padded = np.full((C, N, T, H + 2 * pad, W + 2 * pad), fill)
        padded[:, :, :, pad : pad + H, pad : pad + W] = xc
        xc = padded
    win = sliding_window_view(xc, (k, k), axis=(3, 4))
    return win[:, :, :, ::stride, ::stride]


def conv2d(x, w, b, stride: int, pad: int):
    """Per-frame 2-D cross-correlation. ``w`` is (out_ch, in_ch, k, k)."""
    N, C, T, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise ShapeError(f"conv weight {w.shape} does not fit input {x.shape}")
    Ho, Wo = conv_out_size(H, k, stride, pad), conv_out_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv k={k} stride={stride} pad={pad} collapses {H}x{W}")
    win = _frame_windows(x, k, stride, pad)
    cols = win.transpose(0, 5, 6, 1, 2, 3, 4).reshape(C * k * k, -1)
    out = (w.reshape(O, -1) @ cols).reshape(O, N, T, Ho, Wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    if b is not None:
        out += b[None, :, None, None, None]
    return out, (cols, x.shape, w, stride, pad, b is not None)


def conv2d_backward(g, cache):
    cols, xshape, w, stride, pad, has_bias = cache
    N, C, T, H, W = xshape
    O, _, k, _ = w.shape
    Ho, Wo = g.shape[3], g.shape[4]
    g2 = g.transpose(1, 0, 2, 3, 4).reshape(O, -1)
    dw = (g2 @ cols.T).reshape(w.shape)
    db = _channel_sum(g) if has_bias else None
    if stride == 1 and pad <= k - 1:
        # stride 1: the input gradient is a full correlation with the flipped kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv2d(g, w_flip, None, 1, k - 1 - pad)
        return dx, dw, db
    dcols = (w.reshape(O, -1).T @ g2).reshape(C, k, k, N, T, Ho, Wo)
    dxp = np.zeros((C, N, T, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j]
    dx = dxp[:, :, :, pad : pad + H, pad : pad + W].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(dx), dw, db


def _per_channel(v):
    return v[None, :, None, None, None]


def _channel_sum(a):
    # reduce the contiguous trailing axes first; much faster than axis=(0, 2, 3, 4)
    return a.reshape(a.shape[0], a.shape[1], -1).sum(axis=2).sum(axis=0)


def _channel_dot(a, b):
    N, C = a.shape[:2]
    return np.einsum("ncm,ncm->c", a.reshape(N, C, -1), b.reshape(N, C, -1))


def batchnorm_train(x, gamma, beta, eps):
    """Normalize with batch statistics over (N, T, H, W)."""
    count = x.size // x.shape[1]
    mean = _channel_sum(x) / count
    centered = x - _per_channel(mean)
    var = _channel_dot(centered, centered) / count
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * _per_channel(inv_std)
    out = xhat * _per_channel(gamma) + _per_channel(beta)
    return out, (xhat, inv_std, gamma, mean, var)


def batchnorm_train_backward(g, cache):
    xhat, inv_std, gamma, _, _ = cache
    count = g.size // g.shape[1]
    dbeta = _channel_sum(g)
    dgamma = _channel_dot(g, xhat)
    # dx = gamma*inv_std/count * (count*g - sum(g) - xhat*sum(g*xhat))
    dx = count * g - _per_channel(dbeta) - xhat * _per_channel(dgamma)
    dx *= _per_channel(gamma * inv_std / count)
    return dx, dgamma, dbeta


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps):
    scale = gamma / np.sqrt(running_var + eps)
    shift = beta - running_mean * scale
    out = x * scale[None, :, None, None, None] + shift[None, :, None, None, None]
    xhat = (x - running_mean[None, :, None, None, None]) / np.sqrt(
        running_var[None, :, None, None, None] + eps
    )
    return out, (xhat, scale)


def batchnorm_eval_backward(g, cache):
    xhat, scale = cache
    return g * _per_channel(scale), _channel_dot(g, xhat), _channel_sum(g)


def relu(x):
    mask = x > 0
    return np.maximum(x, 0.0), mask


def relu_backward(g, mask):
    return g * mask


def maxpool2d(x, k: int, stride: int, pad: int = 0):
    """Per-frame max pooling, ties resolved to the first tap in scan order."""
    N, C, T, H, W = x.shape
    Ho, Wo = conv_out_size(H, k, stride, pad), conv_out_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool k={k} stride={stride} collapses {H}x{W}")
    win = _frame_windows(x, k, stride, pad, fill=-np.inf)
    flat = win.reshape(win.shape[:5] + (k * k,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    return out, (arg, x.shape, k, stride, pad)


def maxpool2d_backward(g, cache):
    arg, xshape, k, stride, pad = cache
    N, C, T, H, W = xshape
    Ho, Wo = g.shape[3], g.shape[4]
    gc = g.transpose(1, 0, 2, 3, 4)
    dxp = np.zeros((C, N, T, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += np.where(
                arg == i * k + j, gc, 0.0
            )
    dx = dxp[:, :, :, pad : pad + H, pad : pad + W].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(dx)


def spatial_mean(x):
    return x.mean(axis=(3, 4), keepdims=True)


def spatial_mean_backward(g, xshape):
    H, W = xshape[3], xshape[4]
    return np.broadcast_to(g / (H * W), xshape).copy()


def temporal_mean(x):
    """Average over T. Frames are summed in sorted order, so any permutation of
    the T axis gives a bit-identical result."""
    T = x.shape[2]
    return np.sort(x, axis=2).sum(axis=2, keepdims=True) / T


def temporal_mean_backward(g, xshape):
    return np.broadcast_to(g / xshape[2], xshape).copy()


def linear(x, w, b):
    """``x`` is (N, C, 1, 1, 1) or (N, C); ``w`` is (out, in). Returns (N, out)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects {w.shape[1]} features, got {flat.shape[1]}")
    return flat @ w.T + b, (flat, x.shape, w)


def linear_backward(g, cache):
    flat, xshape, w = cache
    return (g @ w).reshape(xshape), g.T @ flat, g.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ContractError(f"logits {logits.shape} and labels {labels.shape} disagree")
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"labels must lie in [0, {K})")
    top = logits.argmax(axis=1)
    shifted = logits - logits[np.arange(len(logits)), top][:, None]
    # log1p over the non-max terms keeps tiny losses accurate
    rest = np.exp(shifted)
    rest[np.arange(len(logits)), top] = 0.0
    log_norm = np.log1p(rest.sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    loss = float(np.mean(log_norm - picked))
    return loss, (shifted, log_norm, labels)


def softmax_cross_entropy_backward(g, cache):
    shifted, log_norm, labels = cache
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(len(labels)), labels] -= 1.0
    return g * probs / len(labels)
