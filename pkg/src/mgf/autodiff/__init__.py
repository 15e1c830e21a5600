from mgf.autodiff.graph import ComputeGraph
from mgf.autodiff.optim import OptimizerState, make_optimizer, optimizer_step
from mgf.autodiff.params import ParamVector, Segment, param_axpy, param_clone, param_sub
from mgf.autodiff.tensor import (
    ACTIVATIONS,
    Tensor,
    as_tensor,
    grad,
    input_gradient,
    leaky_relu,
    matmul,
    mean,
    no_grad,
    relu,
    row_norm,
    sigmoid,
    softmax_cross_entropy,
    softplus,
    sqrt,
    square,
    tanh,
    tsum,
)

__all__ = [
    "ACTIVATIONS",
    "ComputeGraph",
    "OptimizerState",
    "ParamVector",
    "Segment",
    "Tensor",
    "as_tensor",
    "grad",
    "input_gradient",
    "leaky_relu",
    "make_optimizer",
    "matmul",
    "mean",
    "no_grad",
    "optimizer_step",
    "param_axpy",
    "param_clone",
    "param_sub",
    "relu",
    "row_norm",
    "sigmoid",
    "softmax_cross_entropy",
    "softplus",
    "sqrt",
    "square",
    "tanh",
    "tsum",
]
