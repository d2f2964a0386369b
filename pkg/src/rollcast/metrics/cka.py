import numpy as np


def linear_cka(x, y):
    """Linear centered kernel alignment between feature matrices ``(n, p)`` and ``(n, q)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"need two feature matrices with equal rows, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise ValueError("CKA undefined for a zero-variance feature matrix")
    if x.shape == y.shape and np.array_equal(x, y):
        return 1.0  # BLAS may route x.T @ x and y.T @ x through different kernels
    xy = np.linalg.norm(y.T @ x)
    return float(xy * xy / (xx * yy))
