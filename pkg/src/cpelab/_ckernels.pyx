# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled column-softmax, logistic and power-iteration kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs

cnp.import_array()


def softmax_columns(const double[:, ::1] m):
    cdef Py_ssize_t rows = m.shape[0], cols = m.shape[1], i, j
    cdef double mx, total
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] o = out
    for j in range(cols):
        mx = m[0, j]
        for i in range(1, rows):
            if m[i, j] > mx:
                mx = m[i, j]
        total = 0.0
        for i in range(rows):
            o[i, j] = exp(m[i, j] - mx)
            total += o[i, j]
        for i in range(rows):
            o[i, j] = o[i, j] / total
    return out


def softmax_columns_backward(const double[:, ::1] s, const double[:, ::1] g):
    cdef Py_ssize_t rows = s.shape[0], cols = s.shape[1], i, j
    cdef double dot
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] o = out
    for j in range(cols):
        dot = 0.0
        for i in range(rows):
            dot += s[i, j] * g[i, j]
        for i in range(rows):
            o[i, j] = s[i, j] * (g[i, j] - dot)
    return out


def logistic(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    cdef double e
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(rows):
        for j in range(cols):
            if x[i, j] >= 0:
                o[i, j] = 1.0 / (1.0 + exp(-x[i, j]))
            else:
                e = exp(x[i, j])
                o[i, j] = e / (1.0 + e)
    return out


def power_iteration(const double[:, ::1] w, double[::1] x0, double tol, Py_ssize_t max_iters):
    """Return (estimate, unit vector, iterations, converged) for the top singular value."""
    cdef Py_ssize_t rows = w.shape[0], cols = w.shape[1], i, j, it
    cdef double[::1] x = np.array(x0, dtype=np.float64)
    cdef double[::1] y = np.zeros(rows, dtype=np.float64)
    cdef double[::1] z = np.zeros(cols, dtype=np.float64)
    cdef double nrm, est = 0.0, prev = -1.0, acc
    cdef bint converged = False

    nrm = 0.0
    for j in range(cols):
        nrm += x[j] * x[j]
    nrm = sqrt(nrm)
    if nrm == 0.0:
        return 0.0, np.asarray(x), 0, True
    for j in range(cols):
        x[j] /= nrm

    for it in range(1, max_iters + 1):
        est = 0.0
        for i in range(rows):
            acc = 0.0
            for j in range(cols):
                acc += w[i, j] * x[j]
            y[i] = acc
            est += acc * acc
        est = sqrt(est)
        if est == 0.0:
            return 0.0, np.asarray(x), it, True
        if prev >= 0.0 and fabs(est - prev) <= tol * est:
            converged = True
            break
        prev = est
        nrm = 0.0
        for j in range(cols):
            acc = 0.0
            for i in range(rows):
                acc += w[i, j] * y[i]
            z[j] = acc
            nrm += acc * acc
        nrm = sqrt(nrm)
        if nrm == 0.0:
            return est, np.asarray(x), it, True
        for j in range(cols):
            x[j] = z[j] / nrm
    return est, np.asarray(x), it, converged
