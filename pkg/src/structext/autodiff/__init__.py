from . import tensor as ops
from .params import CheckpointError, ParameterStore, load_into, read_checkpoint, save_checkpoint
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    debug_mode,
    get_dtype,
    precision,
)

__all__ = [
    "CheckpointError",
    "ParameterStore",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "debug_mode",
    "get_dtype",
    "load_into",
    "ops",
    "precision",
    "read_checkpoint",
    "save_checkpoint",
]
