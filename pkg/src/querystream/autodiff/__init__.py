"""Minimal float64 tensor library with reverse-mode differentiation."""

from querystream.autodiff.gradcheck import GradReport, finite_diff_check
from querystream.autodiff.nn import (
    AttentionParams,
    Params,
    add_attention,
    add_linear,
    add_mlp,
    linear,
    mlp_forward,
    mlp_layers,
    multi_head_attention,
)
from querystream.autodiff.tensor import Tape, Tensor, active_tape, backward, layer_norm, no_tape, softmax_rows
from querystream.autodiff.tensor import matmul

__all__ = [
    "AttentionParams",
    "GradReport",
    "Params",
    "Tape",
    "Tensor",
    "active_tape",
    "add_attention",
    "add_linear",
    "add_mlp",
    "backward",
    "finite_diff_check",
    "layer_norm",
    "linear",
    "matmul",
    "mlp_forward",
    "mlp_layers",
    "multi_head_attention",
    "no_tape",
    "softmax_rows",
]
