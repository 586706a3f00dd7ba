"""Dense float64 primitives with reverse-mode gradients."""

from .gradcheck import finite_diff_check
from .params import ParamStore, flatten, load_checkpoint, save_checkpoint
from .tape import (
    LOG_CLAMP,
    Node,
    Tape,
    add,
    add_bias,
    affine,
    backward,
    block_diag_columns,
    concat_cols,
    concat_rows,
    constant,
    gather_rows,
    gradient_of,
    inject_fault,
    layer_norm_row,
    layer_norm_rows,
    log_clamped,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    segment_softmax,
    segment_weighted_sum,
    sigmoid,
    softmax_rows,
    sub,
    total,
    transpose,
)

__all__ = [
    "LOG_CLAMP", "Node", "ParamStore", "Tape", "add", "add_bias", "affine", "backward",
    "block_diag_columns", "concat_cols", "concat_rows", "constant", "finite_diff_check",
    "flatten", "gather_rows", "gradient_of", "inject_fault", "layer_norm_row",
    "layer_norm_rows", "load_checkpoint", "log_clamped", "matmul", "mean", "mul", "relu",
    "reshape", "save_checkpoint", "segment_softmax", "segment_weighted_sum", "sigmoid",
    "softmax_rows", "sub", "total", "transpose",
]
