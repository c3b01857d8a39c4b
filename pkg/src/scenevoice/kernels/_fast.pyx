# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core: fused cosine-similarity and row-softmax passes."""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt

ctypedef fused real:
    float
    double


def cosine_forward(real[:, ::1] q, real[:, ::1] m):
    cdef Py_ssize_t B = q.shape[0], D = q.shape[1], N = m.shape[0]
    cdef object dt = np.float64 if real is double else np.float32
    s_arr = np.empty((B, N), dtype=dt)
    qn_arr = np.empty(B, dtype=dt)
    mn_arr = np.empty(N, dtype=dt)
    cdef real[:, ::1] s = s_arr
    cdef real[::1] qn = qn_arr
    cdef real[::1] mn = mn_arr
    cdef Py_ssize_t b, i, d
    cdef real acc
    for i in range(N):
        acc = 0
        for d in range(D):
            acc += m[i, d] * m[i, d]
        mn[i] = sqrt(acc)
    for b in range(B):
        acc = 0
        for d in range(D):
            acc += q[b, d] * q[b, d]
        qn[b] = sqrt(acc)
    for b in range(B):
        for i in range(N):
            acc = 0
            for d in range(D):
                acc += q[b, d] * m[i, d]
            s[b, i] = acc / (qn[b] * mn[i])
    return s_arr, qn_arr, mn_arr


def cosine_backward(real[:, ::1] g, real[:, ::1] q, real[:, ::1] m,
                    real[:, ::1] s, real[::1] qn, real[::1] mn):
    cdef Py_ssize_t B = q.shape[0], D = q.shape[1], N = m.shape[0]
    cdef object dt = np.float64 if real is double else np.float32
    dq_arr = np.zeros((B, D), dtype=dt)
    dm_arr = np.zeros((N, D), dtype=dt)
    cdef real[:, ::1] dq = dq_arr
    cdef real[:, ::1] dm = dm_arr
    cdef Py_ssize_t b, i, d
    cdef real coef, row, col
    for b in range(B):
        row = 0
        for i in range(N):
            row += g[b, i] * s[b, i]
        row /= qn[b] * qn[b]
        for i in range(N):
            coef = g[b, i] / (qn[b] * mn[i])
            for d in range(D):
                dq[b, d] += coef * m[i, d]
                dm[i, d] += coef * q[b, d]
        for d in range(D):
            dq[b, d] -= row * q[b, d]
    for i in range(N):
        col = 0
        for b in range(B):
            col += g[b, i] * s[b, i]
        col /= mn[i] * mn[i]
        for d in range(D):
            dm[i, d] -= col * m[i, d]
    return dq_arr, dm_arr


def softmax_forward(real[:, ::1] s):
    cdef Py_ssize_t B = s.shape[0], N = s.shape[1]
    cdef object dt = np.float64 if real is double else np.float32
    w_arr = np.empty((B, N), dtype=dt)
    cdef real[:, ::1] w = w_arr
    cdef Py_ssize_t b, i
    cdef real mx, tot
    for b in range(B):
        mx = s[b, 0]
        for i in range(1, N):
            if s[b, i] > mx:
                mx = s[b, i]
        tot = 0
        for i in range(N):
            w[b, i] = exp(s[b, i] - mx)
            tot += w[b, i]
        for i in range(N):
            w[b, i] /= tot
    return w_arr


def softmax_backward(real[:, ::1] g, real[:, ::1] w):
    cdef Py_ssize_t B = w.shape[0], N = w.shape[1]
    cdef object dt = np.float64 if real is double else np.float32
    ds_arr = np.empty((B, N), dtype=dt)
    cdef real[:, ::1] ds = ds_arr
    cdef Py_ssize_t b, i
    cdef real dot
    for b in range(B):
        dot = 0
        for i in range(N):
            dot += g[b, i] * w[b, i]
        for i in range(N):
            ds[b, i] = w[b, i] * (g[b, i] - dot)
    return ds_arr
