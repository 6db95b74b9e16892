"""Deterministic float64 tensors, reverse-mode differentiation and AdamW."""

from . import ops
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, relative_error
from .optim import AdamWState, adamw_step
from .tensor import DTYPE, Parameter, ShapeError, Tape, Tensor, as_tensor, current_tape, no_grad, zero_grads

__all__ = [
    "ops", "Tensor", "Parameter", "Tape", "ShapeError", "DTYPE", "as_tensor", "current_tape",
    "no_grad", "zero_grads", "grad_check", "GradCheckReport", "relative_error",
    "AdamWState", "adamw_step", "config_hash", "save_checkpoint", "load_checkpoint",
]
