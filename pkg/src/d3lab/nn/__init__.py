from .optim import ADAM, SGD_MOMENTUM, OptimizerState, step
from .params import ParamVector, Segment
from .rng import Rng
from .tensor import (
    NonFiniteError,
    Tensor,
    backward,
    grad,
    log_softmax,
    mse_loss,
    relu,
    sin,
    softmax_cross_entropy,
    tanh,
)

__all__ = [
    "ADAM",
    "SGD_MOMENTUM",
    "NonFiniteError",
    "OptimizerState",
    "ParamVector",
    "Rng",
    "Segment",
    "Tensor",
    "backward",
    "grad",
    "log_softmax",
    "mse_loss",
    "relu",
    "sin",
    "softmax_cross_entropy",
    "step",
    "tanh",
]
