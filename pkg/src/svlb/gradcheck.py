"""Finite-difference verification of reverse-mode gradients.

The oracle never touches the tape: it re-evaluates the forward closure
with each input coordinate nudged by +/- eps and forms the central
quotient. Checks should run on float64 tensors; float32 rounding alone
exceeds the default tolerance at eps = 1e-3.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward

EPS = 1e-3
RTOL = 1e-4
ATOL = 1e-6


def finite_difference_grads(f, tensors, eps: float = EPS):
    """Central-difference d f / d t for every tensor in ``tensors``.

    ``f`` is a zero-argument closure rebuilding the scalar loss from the
    given tensors' current buffers.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat, dtype=np.float64)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(f().data)
            flat[i] = keep - eps
            down = float(f().data)
            flat[i] = keep
            g[i] = (up - down) / (2.0 * eps)
        grads.append(g.reshape(t.shape))
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = ATOL) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, atol)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(f, tensors, eps: float = EPS, rtol: float = RTOL, atol: float = ATOL) -> float:
    """Compare autograd gradients of ``f()`` against finite differences.

    Returns the worst relative error over all tensors; raises
    ``AssertionError`` when it exceeds ``rtol``.
    """
    for t in tensors:
        t.zero_grad()
        if not t.requires_grad:
            raise ValueError("check_gradients needs requires_grad tensors")
    loss = f()
    backward(loss)
    analytic = [np.array(t.grad, dtype=np.float64, copy=True) for t in tensors]
    numeric = finite_difference_grads(f, tensors, eps)
    worst = 0.0
    for t, a, n in zip(tensors, analytic, numeric):
        err = max_rel_error(a, n, atol)
        if err > worst:
            worst = err
        if err > rtol:
            raise AssertionError(f"gradient mismatch (rel err {err:.3e} > {rtol:.0e}) for tensor of shape {t.shape}")
    return worst


def param_tensor(rng, shape, scale: float = 1.0, dtype=np.float64) -> Tensor:
    """Random requires-grad tensor for gradient-check fixtures."""
    return Tensor(np.asarray(rng.normal(shape), dtype=dtype) * scale, requires_grad=True)
