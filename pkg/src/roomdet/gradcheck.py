"""Finite-difference gradient checking.

The numeric side never touches the autodiff machinery: it re-evaluates the
forward function with single elements nudged by +/-h and takes central
differences.  Meaningful comparisons require float64 tensors.
"""

from typing import Callable, Sequence

import numpy as np

from .tensor import TAPE, Tensor, no_grad


def numeric_gradients(
    f: Callable[[], float], tensors: Sequence[Tensor], h: float = 1e-5
) -> list:
    """Central-difference gradients of scalar ``f()`` w.r.t. each tensor element."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """max over elements of |a - n| / max(|a|, |n|, 1)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(
    make_loss: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Compare tape gradients of ``make_loss()`` against central differences.

    ``make_loss`` must rebuild the forward pass from the current tensor
    values each time it is called.  Returns the max relative error.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise ValueError("gradient checks require float64 tensors")
        t.grad = None
    TAPE.clear()
    loss = make_loss()
    loss.backward()
    analytic = []
    for t in tensors:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())
    TAPE.clear()
    with no_grad():
        numeric = numeric_gradients(lambda: float(make_loss().data), tensors, h=h)
    return max_relative_error(analytic, numeric)
