"""Minimal reverse-mode differentiation engine and Adam optimiser."""
from . import ops
from .adam import AdamState, adam_step
from .checkpoint import load_params, save_params
from .core import Param, ParamSet, Tape, Tensor, current_tape, run_backward, run_forward
from .gradcheck import finite_difference_check
from .ops import BatchNormState

__all__ = [
    "ops", "AdamState", "adam_step", "load_params", "save_params", "Param", "ParamSet", "Tape",
    "Tensor", "current_tape", "run_backward", "run_forward", "finite_difference_check",
    "BatchNormState",
]
