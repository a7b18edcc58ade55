"""Dense tensors, differentiable ops, deterministic RNG and serialization."""
from . import functional
from .functional import (
    causal_f,
    cross_entropy,
    elu1,
    layer_norm,
    matmul,
    omega,
    relu,
    softmax,
    softplus,
)
from .gradcheck import grad_check
from .tensor import (
    DTYPES,
    MemoryTracker,
    Tensor,
    as_tensor,
    no_grad,
    parameter,
    track_memory,
)

row_softmax = softmax

__all__ = [
    "DTYPES", "MemoryTracker", "Tensor", "as_tensor", "causal_f", "cross_entropy",
    "elu1", "functional", "grad_check", "layer_norm", "matmul", "no_grad", "omega",
    "parameter", "relu", "row_softmax", "softmax", "softplus", "track_memory",
]
