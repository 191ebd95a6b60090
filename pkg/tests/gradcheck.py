"""Central finite-difference oracle, independent of the autodiff path."""

import numpy as np


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar-valued f at x by central differences.

    f receives the (mutated in place, then restored) array and must return
    a python float computed without the autodiff engine's backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f(x)
        flat_x[i] = orig - h
        f_minus = f(x)
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def scalar_finite_difference(f, v: float, h: float = 1e-5) -> float:
    """Central difference of f at scalar v."""
    return (f(v + h) - f(v - h)) / (2.0 * h)
