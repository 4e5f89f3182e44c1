"""Numeric kernels with hand-derived backward passes.

Every primitive comes as a ``*_forward`` / ``*_backward`` pair. Forwards
return ``(output, ctx)`` where ``ctx`` carries exactly what the backward
needs; backwards take ``(ctx, grad_out)`` and return gradients aligned with
the forward inputs. Kernels preserve the input dtype so the finite-difference
harness can drive them in float64 while the model runs in float32.

Shape convention is (N, C, H, W) everywhere. Deterministic by construction:
pooling ties route to the first maximal element in row-major window order,
and the relu subgradient at 0 is 0.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class OpError(ValueError):
    """Raised when an operation's preconditions are violated."""


# ---------------------------------------------------------------------------
# convolution


def conv2d_forward(x, w, b=None, stride=1, padding=0):
    """Cross-correlate ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw).

    Output spatial extent is (H + 2*padding - k) / stride + 1 per axis.
    """
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise OpError(f"weight expects {ci} input channels, tensor has {c}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise OpError(f"non-positive output extent {ho}x{wo} for input {h}x{wd}")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise OpError("input extent not compatible with stride")

    if kh == 1 and kw == 1 and padding == 0:
        cols = x[:, :, ::stride, ::stride].reshape(n, c, ho * wo)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    y = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    if b is not None:
        y = y + b.reshape(1, o, 1, 1)
    ctx = (x.shape, w, b is not None, stride, padding, cols, (ho, wo))
    return y, ctx


def conv2d_backward(ctx, gy):
    x_shape, w, has_bias, stride, padding, cols, (ho, wo) = ctx
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    g2 = gy.reshape(n, o, ho * wo)

    gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3)) if has_bias else None

    gcols = np.matmul(w.reshape(o, -1).T, g2)  # (n, c*kh*kw, ho*wo)
    if kh == 1 and kw == 1 and padding == 0:
        gx = np.zeros(x_shape, dtype=gy.dtype)
        gx[:, :, ::stride, ::stride] = gcols.reshape(n, c, ho, wo)
        return gx, gw, gb
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += g6[
                :, :, ki, kj
            ]
    if padding:
        gx = gxp[:, :, padding:-padding, padding:-padding]
    else:
        gx = gxp
    return gx, gw, gb


def transposed_conv2_forward(x, w, b=None):
    """2x2 stride-2 transposed convolution; w has shape (C_in, C_out, 2, 2).

    Doubles both spatial extents. Windows never overlap, so each output
    pixel is produced by exactly one input pixel.
    """
    n, c, h, wd = x.shape
    ci, co, kh, kw = w.shape
    if (kh, kw) != (2, 2):
        raise OpError("transposed convolution kernel must be 2x2")
    if ci != c:
        raise OpError(f"weight expects {ci} input channels, tensor has {c}")
    y = np.einsum("nchw,cokl->nohkwl", x, w, optimize=True).reshape(n, co, 2 * h, 2 * wd)
    if b is not None:
        y = y + b.reshape(1, co, 1, 1)
    return y, (x, w, b is not None)


def transposed_conv2_backward(ctx, gy):
    x, w, has_bias = ctx
    n, c, h, wd = x.shape
    co = w.shape[1]
    g6 = gy.reshape(n, co, h, 2, wd, 2)
    gx = np.einsum("nohkwl,cokl->nchw", g6, w, optimize=True)
    gw = np.einsum("nchw,nohkwl->cokl", x, g6, optimize=True)
    gb = gy.sum(axis=(0, 2, 3)) if has_bias else None
    return gx, gw, gb


# ---------------------------------------------------------------------------
# normalization and activation


def batch_norm_forward(
    x, gamma, beta, running_mean, running_var, train, momentum=0.9, eps=1e-5
):
    """Per-channel batch normalization.

    Train mode normalizes over (N, H, W) with the biased variance and
    returns exponentially averaged running statistics; infer mode applies
    the stored statistics. Returns ``(y, ctx, new_mean, new_var)``.
    """
    n, c, h, w = x.shape
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise OpError(f"{name} must have shape ({c},), got {arr.shape}")
    if train:
        m = n * h * w
        if m <= 1:
            raise OpError("train-mode batch norm needs more than one value per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))  # biased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        new_mean = momentum * running_mean + (1.0 - momentum) * mean
        new_var = momentum * running_var + (1.0 - momentum) * var
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        new_mean, new_var = running_mean, running_var
    y = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    ctx = (xhat, inv_std, gamma, train)
    return y, ctx, new_mean.astype(x.dtype), new_var.astype(x.dtype)


def batch_norm_backward(ctx, gy):
    xhat, inv_std, gamma, train = ctx
    c = gamma.shape[0]
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    dbeta = gy.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std).reshape(1, c, 1, 1)
    if train:
        gmean = gy.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gdot = (gy * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gx = scale * (gy - gmean - xhat * gdot)
    else:
        gx = scale * gy
    return gx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, gy):
    return gy * mask


# ---------------------------------------------------------------------------
# resampling


def maxpool2_forward(x, times=1):
    """2x2 stride-2 max pooling applied ``times`` times.

    Gradient routes to the first maximal element of each window in
    row-major order, which keeps backward deterministic under ties.
    """
    if times < 1:
        raise OpError("times must be positive")
    ctxs = []
    for _ in range(times):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise OpError(f"spatial extent {h}x{w} not divisible by 2")
        win = (
            x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        idx = np.argmax(win, axis=-1)
        x = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        ctxs.append((idx, (n, c, h, w)))
    return x, ctxs


def maxpool2_backward(ctxs, gy):
    for idx, (n, c, h, w) in reversed(ctxs):
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
        np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
        gy = (
            gwin.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
    return gy


def nearest_up2_forward(x, times=1):
    """Nearest-neighbor upsampling by 2 per application (block replication)."""
    if times < 1:
        raise OpError("times must be positive")
    shape = x.shape
    for _ in range(times):
        x = x.repeat(2, axis=2).repeat(2, axis=3)
    return x, (shape, times)


def nearest_up2_backward(ctx, gy):
    (n, c, h, w), times = ctx
    for _ in range(times):
        hh, ww = gy.shape[2] // 2, gy.shape[3] // 2
        gy = gy.reshape(gy.shape[0], gy.shape[1], hh, 2, ww, 2).sum(axis=(3, 5))
    return gy


# ---------------------------------------------------------------------------
# structural ops


def concat_channels_forward(xs):
    if not xs:
        raise OpError("concat needs at least one input")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise OpError(
                f"concat inputs disagree on batch/spatial extents: "
                f"{xs[0].shape} vs {t.shape}"
            )
    y = xs[0] if len(xs) == 1 else np.concatenate(xs, axis=1)
    return y, [t.shape[1] for t in xs]


def concat_channels_backward(channels, gy):
    grads = []
    start = 0
    for c in channels:
        grads.append(gy[:, start : start + c])
        start += c
    return grads


def add_forward(a, b):
    if a.shape != b.shape:
        raise OpError(f"add inputs must share a shape: {a.shape} vs {b.shape}")
    return a + b, None


def add_backward(ctx, gy):
    return gy, gy


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits, labels):
    """Mean per-pixel cross entropy over softmaxed class logits.

    ``labels`` is an integer (N, H, W) map; returns ``(loss, grad)`` where
    grad is (softmax - onehot) / (N*H*W), the exact gradient of the mean.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise OpError(f"labels must have shape {(n, h, w)}, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise OpError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    log_softmax = shifted - np.log(exp.sum(axis=1, keepdims=True))

    ni, hi, wi = np.ogrid[:n, :h, :w]
    count = n * h * w
    loss = float(-log_softmax[ni, labels, hi, wi].sum(dtype=np.float64) / count)

    grad = softmax
    grad[ni, labels, hi, wi] -= 1.0
    grad /= count
    return loss, grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# resampling dispatch


def resample_forward(x, mode, factor_log2=1, weight=None, bias=None):
    """Scale spatial extents by 2**factor_log2 (down for maxpool2, up for
    nearest_up2 and transposed_conv2, which requires its weight and
    factor_log2 = 1)."""
    if mode == "maxpool2":
        return maxpool2_forward(x, factor_log2)
    if mode == "nearest_up2":
        return nearest_up2_forward(x, factor_log2)
    if mode == "transposed_conv2":
        if weight is None:
            raise OpError("transposed_conv2 resampling requires a weight")
        if factor_log2 != 1:
            raise OpError("transposed_conv2 resampling supports factor_log2=1 only")
        return transposed_conv2_forward(x, weight, bias)
    raise OpError(f"unknown resample mode {mode!r}")


def resample_backward(mode, ctx, gy):
    """Gradients for resample_forward: input grad for the parameter-free
    modes, (input, weight, bias) grads for transposed_conv2."""
    if mode == "maxpool2":
        return maxpool2_backward(ctx, gy)
    if mode == "nearest_up2":
        return nearest_up2_backward(ctx, gy)
    if mode == "transposed_conv2":
        return transposed_conv2_backward(ctx, gy)
    raise OpError(f"unknown resample mode {mode!r}")
