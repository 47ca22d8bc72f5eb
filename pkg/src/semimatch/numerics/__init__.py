from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv2d,
    div,
    exp,
    gather,
    grad,
    grid_sample,
    is_grad_enabled,
    l2_normalize,
    log,
    log_softmax,
    log_softmax_array,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale_exp,
    set_finite_checks,
    softmax,
    softmax_array,
    split,
    sqrt,
    sub,
    transpose,
    tsum,
    vector_norm,
)
from .dump import load_archive, read_tensor, save_archive, write_tensor

__all__ = [name for name in dir() if not name.startswith("_")]
