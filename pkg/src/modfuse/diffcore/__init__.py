"""Minimal dense-tensor engine with taped reverse-mode differentiation."""

from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BCE_EPS,
    add,
    bce_loss,
    bias_add,
    concat,
    concat_rows,
    conv2d,
    elementwise,
    global_avg_pool,
    matmul,
    mul,
    relu,
    sigmoid,
    slice_cols,
    squeeze_row,
    sum_all,
    tanh,
    unsqueeze_row,
)
from .optim import Adam, optimizer_step
from .tensor import Graph, Tensor, backward, zero_grads

__all__ = [
    "Adam", "BCE_EPS", "GradCheckReport", "Graph", "MAGIC", "Tensor",
    "add", "backward", "bce_loss", "bias_add", "concat", "concat_rows",
    "conv2d", "elementwise", "global_avg_pool", "grad_check",
    "load_checkpoint", "matmul", "mul", "optimizer_step", "relu",
    "save_checkpoint", "sigmoid", "slice_cols", "squeeze_row", "sum_all",
    "tanh", "unsqueeze_row", "zero_grads",
]
