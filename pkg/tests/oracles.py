"""Independent reference implementations the tests check the package against.

Everything here is derived from first principles (sliding-window sums,
per-layer parameter arithmetic, fusion-site enumeration) without calling
into the package's own kernels or graph builders, so agreement is evidence
rather than tautology.
"""

from __future__ import annotations

import numpy as np


def conv2d_naive(x, w, b=None, stride=1, padding=0):
    """Quadruple-loop cross-correlation over (N, C, H, W) with (O, C, kh, kw)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((n, o, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[ni, :, yi * stride:yi * stride + kh,
                               xi * stride:xi * stride + kw]
                    y[ni, oi, yi, xi] = np.sum(
                        patch.astype(np.float64) * w[oi].astype(np.float64)
                    )
            if b is not None:
                y[ni, oi] += float(b[oi])
    return y


# ---------------------------------------------------------------------------
# symbolic parameter counting
#
# Conventions mirrored from the architecture's written contract, not its
# code: channels double per level from base_channels; a conv block is two
# [3x3 conv + bias, BN gamma/beta] stages; the decoder upsamples with a 2x2
# transposed conv (bias) and concatenates the same-level skip; the head is a
# 1x1 conv to num_classes. Dense fusion adds, per site, a 1x1 squeeze conv
# to width g (+BN) over the concatenated sources and a 1x1 projection conv
# (+BN) back to the injection point's width.

IN_CHANNELS = 1


def _conv_params(c_in, c_out, k, bias=True):
    return c_in * c_out * k * k + (c_out if bias else 0)


def _bn_params(c):
    return 2 * c


def _conv_block_params(c_in, c_out):
    return (_conv_params(c_in, c_out, 3) + _bn_params(c_out)
            + _conv_params(c_out, c_out, 3) + _bn_params(c_out))


def unet_params(depth, base, num_classes=2, upsample="transposed_conv2"):
    """Closed-form baseline U-Net parameter total, summed layer by layer."""
    ch = lambda i: base * 2 ** (i - 1)
    total = 0
    for i in range(1, depth + 1):
        c_in = IN_CHANNELS if i == 1 else ch(i - 1)
        total += _conv_block_params(c_in, ch(i))
    for level in range(depth - 1, 0, -1):
        if upsample == "transposed_conv2":
            total += ch(level + 1) * ch(level) * 4 + ch(level)
            cat = 2 * ch(level)
        else:
            cat = ch(level) + ch(level + 1)
        total += _conv_block_params(cat, ch(level))
    total += _conv_params(ch(1), num_classes, 1)
    return total


def _site_params(source_channels, target_channels, g):
    """One dense fusion site: squeeze the concatenated sources to width g,
    then project g back to the main path's width; both 1x1 convs carry a
    bias and a BN pair."""
    squeeze = _conv_params(source_channels, g, 1) + _bn_params(g)
    project = _conv_params(g, target_channels, 1) + _bn_params(target_channels)
    return squeeze + project


def _merge_params(g):
    """Merging a cross branch with a decoder branch: one 1x1 fuse from the
    two width-g branches back to width g (+BN); the projection is shared."""
    return _conv_params(2 * g, g, 1) + _bn_params(g)


def fuse_width(base):
    return max(1, base // 4)


def enc_source_levels(degree, level, depth):
    """Encoder levels whose block outputs feed level ``level``'s pool."""
    if degree == "min" or degree == 0:
        return []
    return list(range(max(1, level - 1 - degree), level - 1))


def cross_levels(mode, level, depth):
    k = 1 if mode == "cross3" else 2
    if mode == "upper":
        lo, hi = level, level + k
    elif mode == "lower":
        lo, hi = level - k, level
    else:
        lo, hi = level - k, level + k
    return list(range(max(1, lo), min(depth - 1, hi) + 1))


def enc_dense_params(depth, base, degree):
    if degree == 0:
        return 0
    ch = lambda i: base * 2 ** (i - 1)
    g = fuse_width(base)
    total = 0
    for i in range(2, depth + 1):
        if degree == "min":
            src = IN_CHANNELS
        else:
            levels = enc_source_levels(degree, i, depth)
            if not levels:
                continue
            src = sum(ch(j) for j in levels)
        total += _site_params(src, ch(i - 1), g)
    return total


def cross_dense_params(depth, base, mode):
    if mode == "skip":
        return 0
    ch = lambda i: base * 2 ** (i - 1)
    g = fuse_width(base)
    total = 0
    for level in range(1, depth):
        src = sum(ch(j) for j in cross_levels(mode, level, depth))
        total += _site_params(src, ch(level), g)
    return total


def dec_dense_params(depth, base, degree, cross_mode="skip"):
    """Decoder increment; when a cross branch already occupies a site, the
    decoder branch merges into it instead of adding its own projection."""
    if degree == 0:
        return 0
    ch = lambda i: base * 2 ** (i - 1)
    g = fuse_width(base)
    if degree == "mout":
        src = sum(ch(depth - s) for s in range(1, depth))
        return _site_params(src, ch(1), g)
    total = 0
    for t in range(3, depth):
        level = depth - t
        steps = range(max(1, t - 1 - degree), t - 1)
        if not steps:
            continue
        src = sum(ch(depth - s) for s in steps)
        squeeze = _conv_params(src, g, 1) + _bn_params(g)
        if cross_mode == "skip":
            total += squeeze + _conv_params(g, ch(level), 1) + _bn_params(ch(level))
        else:
            total += squeeze + _merge_params(g)
    return total


def mdunet_params(depth, base, num_classes=2, enc=0, cross="skip", dec=0,
                  upsample="transposed_conv2"):
    return (unet_params(depth, base, num_classes, upsample)
            + enc_dense_params(depth, base, enc)
            + cross_dense_params(depth, base, cross)
            + dec_dense_params(depth, base, dec, cross))
