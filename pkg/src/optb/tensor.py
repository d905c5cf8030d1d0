"""Dense tensors with an explicit storage format, plus the few kernels the rest
of the package needs.

Half precision is a storage format only: every kernel computes in single
precision, so callers convert Half operands before doing math.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

HALF_MAX = 65504.0


class ElementFormat(enum.Enum):
    SINGLE = "single"
    HALF = "half"

    @property
    def width(self) -> int:
        return 4 if self is ElementFormat.SINGLE else 2

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is ElementFormat.SINGLE else np.dtype(np.float16)


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable row-major array tagged with its element format."""

    data: np.ndarray
    format: ElementFormat = ElementFormat.SINGLE

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=self.format.dtype).view()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def single(cls, values) -> "Tensor":
        return cls(np.asarray(values, dtype=np.float32), ElementFormat.SINGLE)

    @classmethod
    def half(cls, values) -> "Tensor":
        return cls(np.asarray(values, dtype=np.float16), ElementFormat.HALF)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.size * self.format.width

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, format={self.format.value})"


def _require_single(*tensors: Tensor) -> None:
    for t in tensors:
        if t.format is not ElementFormat.SINGLE:
            raise TypeError(f"kernel expects Single operands, got {t.format.value}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_single(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    # overflow is reported by the caller's finiteness checks, not warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return Tensor(np.matmul(a.data, b.data), ElementFormat.SINGLE)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-``n`` bias to every row of an ``(m, n)`` tensor."""
    _require_single(x, bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"bias {bias.shape} does not match rows of {x.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        return Tensor(x.data + bias.data, ElementFormat.SINGLE)


def sigmoid(x: Tensor) -> Tensor:
    _require_single(x)
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    # split by sign so exp never overflows
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor(out, ElementFormat.SINGLE)


def relu(x: Tensor) -> Tensor:
    _require_single(x)
    return Tensor(np.maximum(x.data, np.float32(0.0)), ElementFormat.SINGLE)


def convert(x: Tensor, to: ElementFormat) -> Tensor:
    """Change storage format. Single->Half rounds to nearest even; values past
    the Half range become infinities."""
    if x.format is to:
        return x
    with np.errstate(over="ignore"):
        return Tensor(x.data.astype(to.dtype), to)


def to_single(x: Tensor) -> Tensor:
    return convert(x, ElementFormat.SINGLE)
