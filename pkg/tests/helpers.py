"""Shared oracles for the test suite."""

import numpy as np

FD_STEP = 1e-5


def central_diff(f, x, h=FD_STEP):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = f(x)
        flat[k] = orig - h
        down = f(x)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return grad


def rel_err(analytic, numeric):
    """Norm-wise relative error; the tiny floor only guards 0/0."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-300))
