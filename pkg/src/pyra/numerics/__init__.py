"""Tensors, reverse-mode autodiff and deterministic RNG used by the rest of the package."""

from .ops import (
    add,
    broadcast,
    concat,
    constant,
    cross_entropy,
    div,
    exp,
    gather_rows,
    gelu,
    hadamard,
    index,
    layernorm,
    log,
    log_softmax,
    matmul,
    mean,
    neg,
    reshape,
    scatter_mean_rows,
    sigmoid,
    softmax,
    sub,
    sum,
    transpose,
)
from .rng import Rng, gaussian
from .tensor import (
    ContractError,
    DimensionError,
    Graph,
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    set_default_dtype,
    zero_grads,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "Graph",
    "Rng",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "broadcast",
    "concat",
    "constant",
    "cross_entropy",
    "div",
    "exp",
    "gather_rows",
    "gaussian",
    "gelu",
    "get_default_dtype",
    "hadamard",
    "index",
    "layernorm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "neg",
    "reshape",
    "scatter_mean_rows",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "sub",
    "sum",
    "transpose",
    "zero_grads",
]
