"""Minimal dense numeric kernel: tensors, tape autodiff, Adam, attention."""

from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    clip,
    concat,
    constant,
    exp,
    gather_rows,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    param,
    reshape,
    sigmoid,
    softmax,
    sub,
    tensor_sum,
    tanh,
    transpose,
)
from .optim import Adam, AdamState, adam_update, init_adam
from .attention import init_mha_params, multi_head_attention

__all__ = [
    "Adam",
    "AdamState",
    "Tape",
    "Tensor",
    "adam_update",
    "add",
    "backward",
    "clip",
    "concat",
    "constant",
    "exp",
    "gather_rows",
    "init_adam",
    "init_mha_params",
    "log",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "multi_head_attention",
    "narrow",
    "neg",
    "param",
    "reshape",
    "sigmoid",
    "softmax",
    "sub",
    "tensor_sum",
    "tanh",
    "transpose",
]
