from .tensor import DiffGraph, Node, Tensor, grad, is_grad_enabled, no_grad
from .nets import (
    SMOOTH_ACTIVATIONS,
    Conv1d,
    ConvCritic,
    ConvGenerator,
    LinearCritic,
    Mlp,
    MlpCritic,
    MlpGenerator,
    Module,
    ShiftGenerator,
)
from .functional import (
    grad_params_of_gradnorm,
    gradcheck,
    gradient_norm_sq,
    input_gradient,
    param_finite_difference,
    sobolev_constraint,
)

__all__ = [
    "DiffGraph",
    "Node",
    "Tensor",
    "grad",
    "is_grad_enabled",
    "no_grad",
    "SMOOTH_ACTIVATIONS",
    "Conv1d",
    "ConvCritic",
    "ConvGenerator",
    "LinearCritic",
    "Mlp",
    "MlpCritic",
    "MlpGenerator",
    "Module",
    "ShiftGenerator",
    "grad_params_of_gradnorm",
    "gradcheck",
    "gradient_norm_sq",
    "input_gradient",
    "param_finite_difference",
    "sobolev_constraint",
]
