"""Dense float32 tensor substrate and reverse-mode differentiation."""

from .tensor import (
    DTYPE,
    NumericError,
    Parameter,
    as_tensor,
    check_finite,
)
from .mtf import read_mtf, write_mtf
from . import ops
from .autodiff import Node, backward, backward_from, constant, leaf

__all__ = [
    "DTYPE",
    "NumericError",
    "Parameter",
    "as_tensor",
    "check_finite",
    "read_mtf",
    "write_mtf",
    "ops",
    "Node",
    "backward",
    "backward_from",
    "constant",
    "leaf",
]
