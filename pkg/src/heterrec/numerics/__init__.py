from heterrec.numerics.checkpoint import load_arrays, save_arrays
from heterrec.numerics.gradcheck import GradCheckReport, grad_check
from heterrec.numerics.tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    concat_last_dim,
    default_dtype,
    embedding_gather,
    exp,
    layer_norm,
    log,
    masked_logsumexp,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale,
    shadow64,
    slice_,
    sum_,
    swap_last,
    transpose,
    zero_grads,
)

__all__ = [
    "GradCheckReport", "Tape", "Tensor", "active_tape", "add", "as_tensor", "concat_last_dim",
    "default_dtype", "embedding_gather", "exp", "grad_check", "layer_norm", "load_arrays", "log",
    "masked_logsumexp", "masked_softmax", "matmul", "mean", "mul", "neg", "relu", "reshape",
    "save_arrays", "scale", "shadow64", "slice_", "sum_", "swap_last", "transpose", "zero_grads",
]
