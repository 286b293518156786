"""Minimal reverse-mode differentiable tensor engine."""

from .tensor import Tape, Tensor, TraceConsumedError, backward, detach, tensor, zeros
from .ops import (
    StackRows,
    add,
    add_n,
    concat,
    conv2d,
    linear,
    max_pool2d,
    permute,
    pixel_ce_loss,
    pixel_ce_rows,
    relu,
    reshape,
    roi_pool,
    roi_row_indices,
    scale,
    select_class_rows,
    select_rows,
    smooth_l1_loss,
    smooth_l1_rows,
    softmax,
    softmax_nll_loss,
    softmax_nll_rows,
    stack_sizes_for,
    sum_all,
    window_max_stack,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import ParamStore, sgd_step
from .checkpoint import checkpoint_meta, load_state, save_checkpoint, save_state

__all__ = [
    "Tape", "Tensor", "TraceConsumedError", "backward", "detach", "tensor",
    "zeros", "StackRows", "add", "add_n", "concat", "conv2d", "linear",
    "max_pool2d", "permute", "pixel_ce_loss", "pixel_ce_rows", "relu",
    "reshape", "roi_pool", "roi_row_indices", "scale", "select_class_rows",
    "select_rows", "smooth_l1_loss", "smooth_l1_rows", "softmax",
    "softmax_nll_loss", "softmax_nll_rows", "stack_sizes_for", "sum_all",
    "window_max_stack", "GradCheckReport", "grad_check", "ParamStore",
    "sgd_step", "checkpoint_meta", "load_state", "save_checkpoint",
    "save_state",
]
