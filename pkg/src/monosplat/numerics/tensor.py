"""Float32 tensor helpers and the Parameter container.

Tensors are plain row-major ``numpy.float32`` arrays. Operations exported by
the package keep values finite; a NaN/Inf escaping an operation is a bug and
raises ``NumericError`` at the module boundary. Reductions accumulate in
float64 and round back to float32.
"""

from __future__ import annotations

import contextlib

import numpy as np

DTYPE = np.float32

_PRECISE = False  # when True, op outputs stay float64 (finite-difference oracles)


@contextlib.contextmanager
def precision64():
    """Keep op outputs in float64 inside the context.

    For finite-difference gradient oracles only: removes float32 storage
    rounding from forward evaluations so central differences resolve the true
    derivative. Parameters remain float32.
    """
    global _PRECISE
    old = _PRECISE
    _PRECISE = True
    try:
        yield
    finally:
        _PRECISE = old


def storage_dtype():
    return np.float64 if _PRECISE else DTYPE


class NumericError(RuntimeError):
    """An operation produced or received non-finite values."""


def as_tensor(data, shape=None) -> np.ndarray:
    """Return ``data`` as a contiguous row-major float32 array."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise NumericError if ``arr`` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Parameter:
    """A value tensor paired with an accumulated gradient.

    ``trainable=False`` marks a frozen parameter: backward passes never write
    to its gradient and optimizers never update it.
    """

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name or '<anon>'}, shape={self.value.shape}, {kind})"


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Centered uniform init scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return as_tensor(rng.uniform(-bound, bound, size=shape))
