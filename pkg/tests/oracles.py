"""Slow reference implementations used only as test oracles."""

import math

import numpy as np


def softmax_columns_loop(m):
    rows, cols = len(m), len(m[0])
    out = [[0.0] * cols for _ in range(rows)]
    for j in range(cols):
        mx = max(m[i][j] for i in range(rows))
        ex = [math.exp(m[i][j] - mx) for i in range(rows)]
        tot = sum(ex)
        for i in range(rows):
            out[i][j] = ex[i] / tot
    return np.array(out)


def jacobi_singular_values(a, sweeps=60):
    """One-sided Jacobi SVD: orthogonalize columns by plane rotations."""
    u = np.array(a, dtype=np.float64, copy=True)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(u[:, p] @ u[:, p])
                beta = float(u[:, q] @ u[:, q])
                gamma = float(u[:, p] @ u[:, q])
                if gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                up = u[:, p].copy()
                u[:, p] = c * up - s * u[:, q]
                u[:, q] = s * up + c * u[:, q]
        if off < 1e-15:
            break
    return np.sort(np.sqrt(np.sum(u * u, axis=0)))[::-1]


def spectral_norm_oracle(a):
    return float(jacobi_singular_values(a)[0])


def ca_forward_loop(layer, z, e):
    """Cross-attention written token by token with explicit sums."""
    d, m = e.shape
    out = np.zeros(layer.d1)
    for wq, wk, wv, wo in zip(layer.wq, layer.wk, layer.wv, layer.wo):
        q = wq @ z
        logits = []
        for i in range(m):
            k = wk @ e[:, i]
            logits.append(sum(k[a] * q[a] for a in range(len(q))) / math.sqrt(m))
        mx = max(logits)
        w = [math.exp(x - mx) for x in logits]
        tot = sum(w)
        mix = sum((w[i] / tot) * (wv @ e[:, i]) for i in range(m))
        out += wo @ mix
    return out


def adam_scalar(grad_fn, x0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on a list of floats, one coordinate at a time."""
    x = list(x0)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            x[i] -= lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(list(x))
    return trace


def cosine_restart_oracle(it, total, base, cycles):
    period = -(-total // cycles)
    t = it - (it // period) * period
    return base * (1 + math.cos(math.pi * t / period)) / 2
