"""Dense float64 tensor type plus the small set of array ops the engine needs."""

from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeMismatchError(ValueError):
    """Raised when two operands have incompatible shapes."""

    def __init__(self, shape_a: tuple, shape_b: tuple, what: str = "operands"):
        super().__init__(f"shape mismatch between {what}: {shape_a} vs {shape_b}")
        self.shape_a = shape_a
        self.shape_b = shape_b


class Tensor:
    """Immutable dense tensor of 64-bit floats in row-major order."""

    __slots__ = ("_array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(shape)))

    @classmethod
    def full(cls, shape: Sequence[int], value: Scalar) -> "Tensor":
        return cls(np.full(tuple(shape), float(value)))

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the tensor."""
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self._array.reshape(-1)

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    def item(self) -> float:
        return float(self._array.item())

    def tolist(self):
        return self._array.tolist()

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self._array.reshape(tuple(shape)))

    def __len__(self) -> int:
        return self._array.shape[0]

    def __getitem__(self, idx):
        out = self._array[idx]
        if np.isscalar(out) or out.ndim == 0:
            return float(out)
        return Tensor(out)

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    __hash__ = None  # value semantics via ==; not hashable

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _coerce_pair(a: Tensor, b) -> tuple[np.ndarray, np.ndarray | float]:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeMismatchError(a.shape, b.shape)
        return a.array, b.array
    if isinstance(b, (int, float, np.floating, np.integer)):
        return a.array, float(b)
    raise TypeError(f"second operand must be a Tensor or scalar, got {type(b).__name__}")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Apply a pointwise op; `b` may be a Tensor of equal shape or a scalar."""
    if op == "relu":
        return Tensor(np.maximum(a.array, 0.0))
    if op == "scale":
        if not isinstance(b, (int, float, np.floating, np.integer)):
            raise TypeError("scale requires a scalar second operand")
        return Tensor(a.array * float(b))
    if op in ("add", "sub", "mul"):
        x, y = _coerce_pair(a, b)
        if op == "add":
            return Tensor(x + y)
        if op == "sub":
            return Tensor(x - y)
        return Tensor(x * y)
    raise ValueError(f"unknown elementwise op: {op!r}")


def relu(t: Tensor) -> Tensor:
    return elementwise("relu", t)


def _check_axes(t: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(t.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if not (0 <= ax < t.ndim):
            raise ValueError(f"axis {ax} invalid for shape {t.shape}")
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axis in {axes}")
    return axes


def reduce(op: str, t: Tensor, axes: Iterable[int] | int | None = None, p: float | None = None) -> Tensor:
    """Reduce over `axes` (all axes when None). `p` applies to op='percentile'."""
    axes = _check_axes(t, axes)
    if op == "sum":
        return Tensor(np.sum(t.array, axis=axes))
    if op == "mean":
        return Tensor(np.mean(t.array, axis=axes))
    if op == "max":
        return Tensor(np.max(t.array, axis=axes))
    if op == "percentile":
        if p is None or not (0.0 <= p <= 100.0):
            raise ValueError(f"percentile requires 0 <= p <= 100, got {p}")
        return Tensor(np.percentile(t.array, p, axis=axes, method="linear"))
    raise ValueError(f"unknown reduce op: {op!r}")


def upsample_bilinear(t: Tensor, target: tuple[int, int]) -> Tensor:
    """Resize a 2-D map to `target` (H', W') with corner-aligned bilinear sampling."""
    if t.ndim != 2:
        raise ValueError(f"upsample_bilinear expects a 2-D tensor, got shape {t.shape}")
    out_h, out_w = int(target[0]), int(target[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be >= 1, got {(out_h, out_w)}")
    return Tensor(_resize_bilinear(t.array, out_h, out_w))


def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    # Corner-aligned: output corners sample input corners exactly.
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = src.shape
    ys = _axis_coords(out_h, h)
    xs = _axis_coords(out_w, w)
    y0 = np.minimum(ys.astype(np.int64), h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1.0 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1.0 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1.0 - fy) + bot * fy


def resize_bilinear_chw(image: Tensor, target: tuple[int, int]) -> Tensor:
    """Resize a C x H x W image channel by channel with the same bilinear kernel."""
    if image.ndim != 3:
        raise ValueError(f"expected a C x H x W tensor, got shape {image.shape}")
    out_h, out_w = int(target[0]), int(target[1])
    out = np.stack([_resize_bilinear(ch, out_h, out_w) for ch in image.array])
    return Tensor(out)
