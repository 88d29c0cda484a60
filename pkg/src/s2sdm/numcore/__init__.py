"""Numeric substrate: tape autodiff, parameter stores, splittable RNG."""

from .autodiff import (
    Node,
    Tape,
    add,
    concat,
    div,
    element,
    eval_value,
    eval_with_grad,
    exp,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    row,
    sigmoid,
    softmax,
    softmax_stable,
    softplus,
    square,
    stack_rows,
    sub,
    sum_all,
    sum_nodes,
    tanh,
    value_of,
)
from .fdcheck import FdCheckReport, fd_check
from .params import ParamStore, add_stores, scale_store, sgd_step
from .rng import RngStream

__all__ = [
    "Node",
    "Tape",
    "add",
    "concat",
    "div",
    "element",
    "eval_value",
    "eval_with_grad",
    "exp",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "mul",
    "row",
    "sigmoid",
    "softmax",
    "softmax_stable",
    "softplus",
    "square",
    "stack_rows",
    "sub",
    "sum_all",
    "sum_nodes",
    "tanh",
    "value_of",
    "FdCheckReport",
    "fd_check",
    "ParamStore",
    "add_stores",
    "scale_store",
    "sgd_step",
    "RngStream",
]
