"""Minimal tensors, reverse-mode autodiff, layers and Adam."""

from .layers import GRUCell, MLP, Linear, Module, gru_cell, mlp_forward
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NonFiniteValue,
    NonScalarLoss,
    ShapeMismatch,
    Tensor,
    as_tensor,
    concat,
    gather,
    numerical_grad,
    padded_prod,
    segment_sum,
    straight_through,
    where,
)

__all__ = [
    "Adam", "AdamState", "GRUCell", "Linear", "MLP", "Module", "NonFiniteValue", "NonScalarLoss",
    "ShapeMismatch", "Tensor", "adam_step", "as_tensor", "concat", "gather", "gru_cell", "mlp_forward",
    "numerical_grad", "padded_prod", "segment_sum", "straight_through", "where",
]
