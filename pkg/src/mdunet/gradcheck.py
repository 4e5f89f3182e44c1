"""Finite-difference verification of analytic backward passes.

The harness compares d(sum(output * probe))/d(input) computed two ways:
through an op's backward pass, and by central differences on its forward
pass. Kernels preserve dtype, so checks run in float64 to isolate the
analytic formulas from float32 rounding.
"""

from __future__ import annotations

import numpy as np


def max_rel_error(a, b, floor=1e-8) -> float:
    """Element-wise max of |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(forward, inputs, wrt=None, eps=1e-3, seed=0):
    """Return the max relative error of an op's analytic gradients.

    ``forward(*inputs)`` must return ``(out, backward)`` where
    ``backward(grad_out)`` yields one gradient per checked input. The output
    is contracted with a fixed random probe so gradients reduce to scalars.
    Inputs listed in ``wrt`` (all by default) get perturbed element by
    element; keep them away from non-differentiable points (relu kinks,
    pooling ties).
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    if wrt is None:
        wrt = list(range(len(inputs)))

    out, backward = forward(*inputs)
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal(out.shape)
    analytic = backward(probe)
    if len(analytic) != len(wrt):
        raise ValueError("backward returned a gradient count mismatching wrt")

    worst = 0.0
    for slot, idx in enumerate(wrt):
        x = inputs[idx]
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        num_flat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = float(np.sum(forward(*inputs)[0] * probe))
            flat[k] = orig - eps
            lo = float(np.sum(forward(*inputs)[0] * probe))
            flat[k] = orig
            num_flat[k] = (hi - lo) / (2.0 * eps)
        worst = max(worst, max_rel_error(analytic[slot], numeric))
    return worst
