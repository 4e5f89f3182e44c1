"""Incremental quantization of weights to powers of two.

Weights are partitioned by descending magnitude; at each schedule step the
largest remaining ones are snapped to the nearest member of the codebook
{0} U {+-2^p : n2 <= p <= n1} and frozen, then the caller retrains the
still-free weights. Exponent bounds are fixed per parameter from its values
at the first step, so the codebook never drifts between steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


class QuantError(ValueError):
    """Raised for invalid quantization configs, bounds, or schedules."""


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 5
    schedule: tuple[float, ...] = (0.5, 0.75, 1.0)
    partition_strategy: str = "magnitude_desc"
    # retraining budget between steps, in iterations (not fixed by the
    # training protocol; callers wire it into their retrain callback)
    retrain_iterations: int = 50

    def __post_init__(self):
        if self.bits not in (3, 5, 7):
            raise QuantError(f"bits must be one of 3, 5, 7, got {self.bits}")
        sched = tuple(float(f) for f in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if not sched:
            raise QuantError("schedule must be non-empty")
        if any(not (0.0 < f <= 1.0) for f in sched):
            raise QuantError("schedule fractions must lie in (0, 1]")
        if any(b <= a for a, b in zip(sched, sched[1:])):
            raise QuantError("schedule must be strictly ascending")
        if self.partition_strategy != "magnitude_desc":
            raise QuantError(f"unknown partition strategy {self.partition_strategy!r}")
        if self.retrain_iterations < 0:
            raise QuantError("retrain_iterations must be non-negative")


@dataclass(frozen=True)
class QuantBounds:
    """Largest and smallest admissible exponents of the codebook."""

    n1: int
    n2: int

    def __post_init__(self):
        if self.n1 < self.n2:
            raise QuantError(f"n1={self.n1} must be >= n2={self.n2}")


def codebook(bounds: QuantBounds) -> np.ndarray:
    """All representable values, ascending, as float64."""
    powers = [2.0 ** p for p in range(bounds.n2, bounds.n1 + 1)]
    return np.array([-v for v in reversed(powers)] + [0.0] + powers)


@dataclass
class QuantState:
    """Per-parameter bounds and progress of an incremental schedule.

    ``bounds[name]`` is None for parameters that were entirely zero when
    first seen; their elements freeze to 0 without a codebook. The frozen
    masks themselves live on the Parameters.
    """

    bits: int
    bounds: dict[str, QuantBounds | None] = field(default_factory=dict)
    quantized_fraction: dict[str, float] = field(default_factory=dict)
    applied: list[float] = field(default_factory=list)
    snapshots: list[tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]] = field(
        default_factory=list
    )
    aborted: bool = False


def compute_bounds(values: np.ndarray, bits: int) -> QuantBounds:
    """Exponent bounds for a weight tensor: n1 from the largest magnitude,
    n2 sized so the codebook holds 2^bits - 1 values."""
    if bits not in (3, 5, 7):
        raise QuantError(f"bits must be one of 3, 5, 7, got {bits}")
    m = float(np.max(np.abs(values)))
    if m == 0.0:
        raise QuantError("cannot compute bounds for an all-zero tensor")
    n1 = int(np.floor(np.log2(4.0 * m / 3.0)))
    n2 = n1 - (2 ** (bits - 1) - 2)
    return QuantBounds(n1, n2)


def _quantize_array(values: np.ndarray, bounds: QuantBounds) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(v)
    mag = np.abs(v)
    live = mag >= 3.0 * 2.0 ** (bounds.n2 - 2)
    if np.any(live):
        p = np.floor(np.log2(4.0 * mag[live] / 3.0))
        p = np.minimum(p, float(bounds.n1))
        out[live] = np.sign(v[live]) * np.exp2(p)
    return out


def quantize_value(w: float, bounds: QuantBounds) -> float:
    """Nearest codebook value in magnitude: sign(w)*2^p for the band
    3*2^(p-2) <= |w| < 3*2^(p-1), zero below the lowest band, clamped to
    2^n1 above the highest."""
    return float(_quantize_array(np.array([w]), bounds)[0])


def partition_weights(param: Parameter, target_fraction: float,
                      strategy: str = "magnitude_desc") -> np.ndarray:
    """Mask of newly selected elements: the largest unfrozen magnitudes,
    enough to bring the frozen count up to round(target_fraction * size).
    Ties keep index order. Raises if the target is below the current
    frozen fraction."""
    if strategy != "magnitude_desc":
        raise QuantError(f"unknown partition strategy {strategy!r}")
    if not (0.0 <= target_fraction <= 1.0):
        raise QuantError(f"target fraction {target_fraction} outside [0, 1]")
    n = param.size
    frozen = param.frozen_mask.ravel()
    current = int(np.count_nonzero(frozen))
    target = int(np.floor(target_fraction * n + 0.5))
    if target < current:
        raise QuantError(
            f"{param.name}: target fraction {target_fraction} would unfreeze "
            f"elements ({current}/{n} already frozen)"
        )
    newly = np.zeros(n, dtype=bool)
    need = target - current
    if need:
        free = np.flatnonzero(~frozen)
        order = np.argsort(-np.abs(param.values.ravel()[free]), kind="stable")
        newly[free[order[:need]]] = True
    return newly.reshape(param.values.shape)


def apply_quant_step(params: dict[str, Parameter], state: QuantState,
                     target_fraction: float) -> QuantState:
    """Quantize and freeze each parameter up to ``target_fraction``.

    Bounds are computed from the current values the first time a parameter
    is seen and reused afterwards. All-zero parameters freeze to 0.
    """
    if state.applied and target_fraction <= state.applied[-1]:
        raise QuantError(
            f"schedule fraction {target_fraction} not above last applied "
            f"{state.applied[-1]}"
        )
    for name in sorted(params):
        p = params[name]
        if name not in state.bounds:
            state.bounds[name] = (
                compute_bounds(p.values, state.bits) if np.any(p.values) else None
            )
        bounds = state.bounds[name]
        newly = partition_weights(p, target_fraction)
        if np.any(newly):
            if bounds is None:
                p.values[newly] = 0.0
            else:
                p.values[newly] = _quantize_array(p.values[newly], bounds).astype(
                    p.values.dtype
                )
        p.frozen_mask |= newly
        state.quantized_fraction[name] = float(np.count_nonzero(p.frozen_mask)) / p.size
    state.applied.append(float(target_fraction))
    return state


def run_inq_schedule(params: dict[str, Parameter], config: QuantConfig,
                     retrain=None, on_snapshot=None) -> QuantState:
    """Alternate quantization steps with retraining over the schedule.

    ``retrain(step_index, fraction)`` runs between steps and must honor the
    frozen masks; ``on_snapshot(step_index, fraction, params)`` fires after
    each retrained step. A snapshot of every parameter (values and mask) is
    kept on the returned state, so partial models at every fraction remain
    materialized. If the callback raises, the exception propagates with the
    state at the last completed quantization step attached as
    ``exc.quant_state``.
    """
    state = QuantState(bits=config.bits)
    for k, fraction in enumerate(config.schedule):
        apply_quant_step(params, state, fraction)
        if retrain is not None:
            try:
                retrain(k, fraction)
            except Exception as exc:
                state.aborted = True
                exc.quant_state = state
                raise
        state.snapshots.append(
            (fraction, {n: (p.values.copy(), p.frozen_mask.copy())
                        for n, p in params.items()})
        )
        if on_snapshot is not None:
            on_snapshot(k, fraction, params)
    return state
