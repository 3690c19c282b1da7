"""Minimal reverse-mode differentiation on numpy arrays, plus Adam."""

from . import ops
from .gradcheck import check_gradients, numerical_gradients, relative_error
from .optim import Adam
from .tensor import GraphError, ShapeError, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "Adam",
    "GraphError",
    "ShapeError",
    "Tensor",
    "backward",
    "check_gradients",
    "grad_enabled",
    "no_grad",
    "numerical_gradients",
    "ops",
    "relative_error",
]
