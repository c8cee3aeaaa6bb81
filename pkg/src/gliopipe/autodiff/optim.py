"""Parameter initialisation and plain SGD."""
from __future__ import annotations

import numpy as np

from .tensor import GraphError, Tensor


def kaiming_uniform(shape, fan_in, rng):
    """He/Kaiming uniform init for ReLU networks: U(-b, b), b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(values, name=None):
    return Tensor(values, requires_grad=True, name=name)


def sgd_step(params, lr):
    """theta <- theta - lr * grad for every parameter, then clear the grads."""
    params = list(params)
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise GraphError(f"sgd_step: no gradient for {', '.join(missing[:5])}")
    for p in params:
        p.values -= lr * p.grad
        p.grad = None


def zero_grad(params):
    for p in params:
        p.grad = None
