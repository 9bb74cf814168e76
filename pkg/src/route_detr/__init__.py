"""Desk-scale detection transformer with suppressor/delegator attention routing."""

__version__ = "0.1.0"

from .tensor import Tensor, Graph, no_grad, backward  # noqa: F401
