"""Minimal differentiable-computation substrate (float64, numpy-backed)."""

from .adam import AdamState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint
from .graph import Graph, backward, finite_diff_check, forward, numeric_gradients, relative_error
from .tensor import (
    DTYPE,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    attention,
    concat,
    debug_enabled,
    debug_mode,
    dropout,
    exp,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    set_debug,
    slice_,
    softmax,
    square,
    squared_error,
    sub,
    sum_,
    swap_last,
    take_rows,
    transpose,
)

__all__ = [
    "AdamState", "DTYPE", "Graph", "NonFiniteError", "ShapeError", "Tensor",
    "adam_step", "add", "attention", "backward", "concat", "debug_enabled", "debug_mode",
    "dropout", "exp", "finite_diff_check", "forward", "layer_norm", "linear", "load_checkpoint",
    "log", "log_softmax", "matmul", "mean", "mul", "no_grad", "numeric_gradients", "relative_error", "relu", "reshape",
    "save_checkpoint", "set_debug", "slice_", "softmax", "square", "squared_error", "sub",
    "sum_", "swap_last", "take_rows", "transpose",
]
