from . import core as ops
from .core import Node, Tape, constant, grad
from .gradcheck import GradCheckReport, grad_check
from .params import (
    Adam,
    AdamState,
    ParamStore,
    adam_step,
    backward,
    load_checkpoint,
    param_count,
    save_checkpoint,
)

__all__ = [
    "Adam", "AdamState", "GradCheckReport", "Node", "ParamStore", "Tape",
    "adam_step", "backward", "constant", "grad", "grad_check", "load_checkpoint",
    "ops", "param_count", "save_checkpoint",
]
