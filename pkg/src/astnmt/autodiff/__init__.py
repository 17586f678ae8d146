"""Minimal reverse-mode differentiation engine on numpy float64 arrays."""

from . import ops
from .optim import AdamState, adam_step
from .tensor import DTYPE, ShapeError, Tape, Tensor, active_tape, as_tensor, backward

__all__ = [
    "DTYPE",
    "AdamState",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "as_tensor",
    "backward",
    "ops",
]
