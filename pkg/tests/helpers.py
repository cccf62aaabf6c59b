"""Shared independent oracles for the test suite.

The finite-difference helpers re-evaluate a loss callable at perturbed
inputs; they never touch the analytic backward path they are used to check.
"""

from __future__ import annotations

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over entries of |analytic - numeric| / max(1, |numeric|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(n))
    return float((np.abs(a - n) / denom).max())


def assert_grads_close(analytic, numeric, tol: float = 1e-4):
    err = rel_grad_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: max relative error {err:.3e} >= {tol}"


def params_fd_grads(loss_of_params, param_arrays, h: float = 1e-5):
    """Finite-difference gradients for a list of parameter arrays.

    loss_of_params is a zero-argument callable evaluating the scalar loss
    from the (mutated in place) parameter arrays.
    """
    grads = []
    for p in param_arrays:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_of_params()
            flat[i] = old - h
            fm = loss_of_params()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def min_relu_margin(pres) -> float:
    """Smallest |pre-activation| across cached layers; used to skip instances
    whose finite differences would straddle a relu kink."""
    return min(float(np.abs(p).min()) for p in pres)
