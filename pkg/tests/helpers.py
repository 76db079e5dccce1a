"""Independent numerical oracles shared by the test modules."""

import numpy as np


def central_diff(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn(x)
        x[i] = orig - h
        fm = fn(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def random_row_stochastic(rng, K, strength=3.0):
    """Invertible, diagonally dominant noise matrix with uneven off-diagonals."""
    m = rng.random((K, K)) + strength * np.eye(K)
    return m / m.sum(axis=1, keepdims=True)
