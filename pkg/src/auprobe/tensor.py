"""Dense tensor helpers shared by every other module.

Tensors are plain C-contiguous numpy arrays: row-major, last axis varies
fastest. The constructors below add the shape/length validation the rest
of the code relies on, and keep the precision switch in one place
(float32 for training speed, float64 for gradient verification).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible or do not match the data length."""


def _validated_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("shape needs at least one axis")
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return np.zeros(_validated_shape(shape), dtype=dtype)


def ones(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return np.ones(_validated_shape(shape), dtype=dtype)


def from_values(shape: Sequence[int], values, dtype=DEFAULT_DTYPE) -> Tensor:
    shape = _validated_shape(shape)
    flat = np.asarray(values, dtype=dtype).reshape(-1)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ShapeError(
            f"{flat.size} values cannot fill shape {shape} ({expected} slots)"
        )
    return np.ascontiguousarray(flat.reshape(shape))


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return a + b


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return a * b


def scale(t: Tensor, s: float) -> Tensor:
    return t * t.dtype.type(s)


def inner_product(a: Tensor, b: Tensor) -> float:
    """Sum of elementwise products, as a python float."""
    _check_same_shape(a, b)
    return float(np.dot(a.reshape(-1), b.reshape(-1)))
