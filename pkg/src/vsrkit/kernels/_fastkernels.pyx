# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend.

Bit-for-bit the same contracts as ``vsrkit.kernels.pure``; see that
module for the layout documentation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log1p

cnp.import_array()


def im2col2d(double[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
             int oh, int ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    out = np.empty((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t ni, ci, i, j, a, b, row, col
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (ni * oh + i) * ow + j
                for ci in range(c):
                    col = ci * kh * kw
                    for a in range(kh):
                        for b in range(kw):
                            cols[row, col + a * kw + b] = x[ni, ci, i * sh + a, j * sw + b]
    return out


def col2im2d(double[:, ::1] cols, int n, int c, int hp, int wp,
             int kh, int kw, int sh, int sw, int oh, int ow):
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t ni, ci, i, j, a, b, row, col
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (ni * oh + i) * ow + j
                for ci in range(c):
                    col = ci * kh * kw
                    for a in range(kh):
                        for b in range(kw):
                            x[ni, ci, i * sh + a, j * sw + b] += cols[row, col + a * kw + b]
    return out


def im2col3d(double[:, :, :, :, ::1] x, int kt, int kh, int kw,
             int st, int sh, int sw, int ot, int oh, int ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    out = np.empty((n * ot * oh * ow, c * kt * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t ni, ci, t, i, j, a, b, d, row, col
    for ni in range(n):
        for t in range(ot):
            for i in range(oh):
                for j in range(ow):
                    row = ((ni * ot + t) * oh + i) * ow + j
                    for ci in range(c):
                        col = ci * kt * kh * kw
                        for a in range(kt):
                            for b in range(kh):
                                for d in range(kw):
                                    cols[row, col + (a * kh + b) * kw + d] = \
                                        x[ni, ci, t * st + a, i * sh + b, j * sw + d]
    return out


def col2im3d(double[:, ::1] cols, int n, int c, int tp, int hp, int wp,
             int kt, int kh, int kw, int st, int sh, int sw,
             int ot, int oh, int ow):
    out = np.zeros((n, c, tp, hp, wp), dtype=np.float64)
    cdef double[:, :, :, :, ::1] x = out
    cdef Py_ssize_t ni, ci, t, i, j, a, b, d, row, col
    for ni in range(n):
        for t in range(ot):
            for i in range(oh):
                for j in range(ow):
                    row = ((ni * ot + t) * oh + i) * ow + j
                    for ci in range(c):
                        col = ci * kt * kh * kw
                        for a in range(kt):
                            for b in range(kh):
                                for d in range(kw):
                                    x[ni, ci, t * st + a, i * sh + b, j * sw + d] += \
                                        cols[row, col + (a * kh + b) * kw + d]
    return out


cdef inline double _logaddexp(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a < b:
        a, b = b, a
    return a + log1p(exp(b - a))


def ctc_forward_backward(double[:, ::1] logp, long[:] labels, int blank):
    cdef Py_ssize_t t_len = logp.shape[0], klass = logp.shape[1]
    cdef Py_ssize_t u = labels.shape[0], s_len = 2 * u + 1
    cdef Py_ssize_t t, s

    ext_arr = np.full(s_len, blank, dtype=np.int64)
    ext_arr[1::2] = np.asarray(labels)
    cdef long[:] ext = ext_arr

    skip_arr = np.zeros(s_len, dtype=np.int64)
    for s in range(2, s_len):
        if ext[s] != blank and ext[s] != ext[s - 2]:
            skip_arr[s] = 1
    cdef long[:] can_skip = skip_arr

    alpha_arr = np.full((t_len, s_len), -INFINITY)
    beta_arr = np.full((t_len, s_len), -INFINITY)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double acc, loss, tail

    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _logaddexp(acc, alpha[t - 1, s - 1])
            if s >= 2 and can_skip[s]:
                acc = _logaddexp(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + logp[t, ext[s]]

    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail = _logaddexp(tail, alpha[t_len - 1, s_len - 2])
    loss = -tail

    beta[t_len - 1, s_len - 1] = logp[t_len - 1, ext[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = logp[t_len - 1, ext[s_len - 2]]
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            acc = beta[t + 1, s]
            if s + 1 < s_len:
                acc = _logaddexp(acc, beta[t + 1, s + 1])
            if s + 2 < s_len and can_skip[s + 2]:
                acc = _logaddexp(acc, beta[t + 1, s + 2])
            beta[t, s] = acc + logp[t, ext[s]]

    grad_arr = np.zeros((t_len, klass))
    cdef double[:, ::1] grad = grad_arr
    cdef double g
    for t in range(t_len):
        for s in range(s_len):
            g = alpha[t, s] + beta[t, s] - logp[t, ext[s]] + loss
            if g != -INFINITY and g == g:  # finite, not nan
                grad[t, ext[s]] -= exp(g)
    return float(loss), grad_arr
