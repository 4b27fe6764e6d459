"""Numpy implementations of the hot kernels, used when the extension is absent."""

import numpy as np


def softmax_columns(m):
    shifted = m - m.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_columns_backward(s, g):
    dot = (s * g).sum(axis=0, keepdims=True)
    return s * (g - dot)


def logistic(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def power_iteration(w, x0, tol, max_iters):
    x = np.array(x0, dtype=np.float64)
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        return 0.0, x, 0, True
    x /= nrm
    prev = -1.0
    est = 0.0
    it = 0
    for it in range(1, max_iters + 1):
        y = w @ x
        est = float(np.sqrt(y @ y))
        if est == 0.0:
            return 0.0, x, it, True
        if prev >= 0.0 and abs(est - prev) <= tol * est:
            return est, x, it, True
        prev = est
        z = w.T @ y
        nrm = float(np.sqrt(z @ z))
        if nrm == 0.0:
            return est, x, it, True
        x = z / nrm
    return est, x, it, False
