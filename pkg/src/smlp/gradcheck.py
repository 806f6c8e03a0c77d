"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """d f()/d x by central differences, perturbing ``x.data`` in place."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(max|a|, max|b|, floor)."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradient_pairs(f: Callable[[], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-6) -> list[tuple[np.ndarray, np.ndarray]]:
    """(analytic, numerical) gradient for each tensor in ``params``."""
    for p in params:
        p.grad = None
    T.backward(f())
    out = []
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        out.append((analytic, numerical_grad(f, p, eps)))
    return out


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                    floor: float = 1e-8) -> list[float]:
    """Relative error of analytic vs numerical gradient, one value per tensor.

    Raise ``floor`` when some tensors have (near) zero true gradient, since
    their finite differences are pure roundoff.
    """
    return [rel_error(a, n, floor) for a, n in gradient_pairs(f, params, eps)]
