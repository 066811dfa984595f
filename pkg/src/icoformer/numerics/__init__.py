from . import ops
from .gradcheck import GradCheckResult, grad_check
from .layers import LayerNorm, Linear, Module
from .optim import Adam, AdamState, adam_step
from .tensor import Parameter, Tape, Tensor, active_tape

__all__ = [
    "Adam", "AdamState", "GradCheckResult", "LayerNorm", "Linear", "Module", "Parameter",
    "Tape", "Tensor", "active_tape", "adam_step", "grad_check", "ops",
]
