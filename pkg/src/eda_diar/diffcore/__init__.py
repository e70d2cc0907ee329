from .optim import DESK_WARMUP_STEPS, PAPER_WARMUP_STEPS, Adam, lr_at
from .tensor import (
    LstmParams,
    Tensor,
    add,
    backward,
    clip,
    concat,
    dropout,
    exp,
    layer_norm,
    linear,
    log,
    lstm_cell,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_debug_checks,
    sigmoid,
    slice_,
    softmax,
    sub,
    sum_,
    swap_last2,
    take_rows,
    tanh,
    transpose,
    zero_grads,
)

__all__ = [
    "Adam",
    "DESK_WARMUP_STEPS",
    "PAPER_WARMUP_STEPS",
    "LstmParams",
    "Tensor",
    "add",
    "backward",
    "clip",
    "concat",
    "dropout",
    "exp",
    "layer_norm",
    "linear",
    "log",
    "lr_at",
    "lstm_cell",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "set_debug_checks",
    "sigmoid",
    "slice_",
    "softmax",
    "sub",
    "sum_",
    "swap_last2",
    "take_rows",
    "tanh",
    "transpose",
    "zero_grads",
]
