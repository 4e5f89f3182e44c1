"""Dense rank-4 tensor and parameter containers used throughout the toolkit.

All feature maps are stored as float32 arrays in (batch, channel, height,
width) order. ``Tensor`` is the boundary type handed to and returned by the
model; the numeric kernels in :mod:`mdunet.ops` operate on raw arrays so that
verification code can run them in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TensorError(ValueError):
    """Raised when a tensor or parameter violates its structural contract."""


def _as_nchw(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 4:
        raise TensorError(f"expected a rank-4 (N,C,H,W) array, got rank {arr.ndim}")
    return arr


@dataclass
class Tensor:
    """A dense (N, C, H, W) float32 array with an optional gradient slot."""

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.values = _as_nchw(self.values)
        if not np.all(np.isfinite(self.values)):
            raise TensorError("tensor contains non-finite values")
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=np.float32)
            if self.grad.shape != self.values.shape:
                raise TensorError(
                    f"grad shape {self.grad.shape} does not match values shape {self.values.shape}"
                )

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape


@dataclass
class Parameter:
    """A named learnable array plus the freeze mask honored by the optimizer.

    Elements whose ``frozen_mask`` entry is True are never touched by an
    optimizer step; the quantizer uses this to pin codebook values in place.
    """

    name: str
    values: np.ndarray
    frozen_mask: np.ndarray = field(default=None)  # type: ignore[assignment]
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.frozen_mask is None:
            self.frozen_mask = np.zeros(self.values.shape, dtype=bool)
        else:
            self.frozen_mask = np.asarray(self.frozen_mask, dtype=bool)
            if self.frozen_mask.shape != self.values.shape:
                raise TensorError(
                    f"frozen_mask shape {self.frozen_mask.shape} does not match "
                    f"values shape {self.values.shape} for parameter {self.name!r}"
                )

    @property
    def size(self) -> int:
        return int(self.values.size)

    def zero_grad(self):
        self.grad = None

    def add_grad(self, g: np.ndarray):
        g = np.asarray(g, dtype=np.float32)
        if g.shape != self.values.shape:
            raise TensorError(
                f"gradient shape {g.shape} does not match parameter {self.name!r} "
                f"shape {self.values.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a convolution site.

    The toolkit only builds 3x3 same-size convolutions (stride 1, pad 1) and
    1x1 projections (pad 0), so those combinations are the only legal ones.
    """

    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.out_channels < 1:
            raise TensorError("out_channels must be positive")
        if self.kernel not in (1, 3):
            raise TensorError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise TensorError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding not in (0, 1):
            raise TensorError(f"padding must be 0 or 1, got {self.padding}")
        if self.kernel == 3 and (self.padding != 1 or self.stride != 1):
            raise TensorError("3x3 convolutions must use padding 1 and stride 1")
        if self.kernel == 1 and self.padding != 0:
            raise TensorError("1x1 convolutions must use padding 0")
