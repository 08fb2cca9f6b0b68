"""Shared oracles for the test-suite."""

import numpy as np

from data2eqn.autodiff import Tensor

FLOOR = 1e-6  # magnitudes below this are compared absolutely


def numeric_grads(params: dict, loss_fn, h: float = 1e-4) -> dict:
    """Central differences of ``loss_fn(tensors)`` for every parameter entry."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn({k: Tensor(v) for k, v in params.items()}).item()
            flat[i] = orig - h
            down = loss_fn({k: Tensor(v) for k, v in params.items()}).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def analytic_grads(params: dict, loss_fn) -> dict:
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss_fn(tensors).backward()
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


def max_relative_error(a: dict, n: dict) -> float:
    worst = 0.0
    for k in a:
        err = np.abs(a[k] - n[k]) / np.maximum(np.maximum(np.abs(a[k]), np.abs(n[k])), FLOOR)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def gradient_check(params: dict, loss_fn, h: float = 1e-4) -> float:
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    return max_relative_error(analytic_grads(params, loss_fn), numeric_grads(params, loss_fn, h))
