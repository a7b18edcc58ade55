"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, no_grad


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6):
    grads = []
    with no_grad():
        for x in inputs:
            g = np.zeros_like(x.data)
            flat, gflat = x.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn(*inputs).data)
                flat[i] = orig - eps
                fm = float(fn(*inputs).data)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor]):
    saved = [x.requires_grad for x in inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    try:
        out = fn(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check: loss must be scalar, got shape {out.shape}")
        out.backward()
        return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    finally:
        for x, s in zip(inputs, saved):
            x.requires_grad = s
            x.grad = None


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest elementwise relative error between backprop and central differences.

    ``fn(*inputs)`` must return a scalar tensor. Relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise ContractError("grad_check requires f64 inputs")
    analytic = analytic_grad(fn, inputs)
    numeric = numeric_grad(fn, inputs, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
