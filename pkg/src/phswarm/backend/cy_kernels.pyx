# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the block-structured kernels.

Same contracts as py_kernels; the docstrings there are authoritative. These
loops avoid the padding copies of the NumPy fallback, which matters because the
kernels run thousands of times per gradient update on small blocks.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

name = "cython"


def bmm_cc_rb(double[:, ::1] a, double[:, ::1] b, long[::1] offsets):
    cdef Py_ssize_t nb = offsets.shape[0] - 1
    cdef Py_ssize_t ra = a.shape[0], rb = b.shape[0]
    out_arr = np.zeros((nb * ra, rb))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, i, j, c, lo, hi, row0
    cdef double acc
    for k in range(nb):
        lo = offsets[k]
        hi = offsets[k + 1]
        row0 = k * ra
        for i in range(ra):
            for j in range(rb):
                acc = 0.0
                for c in range(lo, hi):
                    acc += a[i, c] * b[j, c]
                out[row0 + i, j] = acc
    return out_arr


def bmm_rc_cb(double[:, ::1] s, double[:, ::1] x, long[::1] offsets):
    cdef Py_ssize_t nb = offsets.shape[0] - 1
    cdef Py_ssize_t p = s.shape[0] // nb, q = s.shape[1]
    out_arr = np.zeros((p, x.shape[1]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, i, j, c, lo, hi, row0
    cdef double acc
    for k in range(nb):
        lo = offsets[k]
        hi = offsets[k + 1]
        row0 = k * p
        for i in range(p):
            for c in range(lo, hi):
                acc = 0.0
                for j in range(q):
                    acc += s[row0 + i, j] * x[j, c]
                out[i, c] = acc
    return out_arr


def bmm_rtc_cb(double[:, ::1] s, double[:, ::1] x, long[::1] offsets):
    cdef Py_ssize_t nb = offsets.shape[0] - 1
    cdef Py_ssize_t p = s.shape[0] // nb, q = s.shape[1]
    out_arr = np.zeros((q, x.shape[1]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, i, j, c, lo, hi, row0
    cdef double acc
    for k in range(nb):
        lo = offsets[k]
        hi = offsets[k + 1]
        row0 = k * p
        for j in range(q):
            for c in range(lo, hi):
                acc = 0.0
                for i in range(p):
                    acc += s[row0 + i, j] * x[i, c]
                out[j, c] = acc
    return out_arr


def block_colsum(double[:, ::1] x, long[::1] offsets):
    cdef Py_ssize_t nb = offsets.shape[0] - 1
    cdef Py_ssize_t r = x.shape[0]
    out_arr = np.zeros((r, nb))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, i, c
    cdef double acc
    for i in range(r):
        for k in range(nb):
            acc = 0.0
            for c in range(offsets[k], offsets[k + 1]):
                acc += x[i, c]
            out[i, k] = acc
    return out_arr


def block_repeat(double[:, ::1] y, long[::1] offsets):
    cdef Py_ssize_t nb = offsets.shape[0] - 1
    cdef Py_ssize_t r = y.shape[0]
    out_arr = np.empty((r, offsets[nb]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, i, c
    for i in range(r):
        for k in range(nb):
            for c in range(offsets[k], offsets[k + 1]):
                out[i, c] = y[i, k]
    return out_arr


def gather_cols(double[:, ::1] x, long[::1] idx):
    cdef Py_ssize_t r = x.shape[0], m = idx.shape[0]
    out_arr = np.empty((r, m))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, c
    for i in range(r):
        for c in range(m):
            out[i, c] = x[i, idx[c]]
    return out_arr


def scatter_add_cols(double[:, ::1] g, long[::1] idx, Py_ssize_t total):
    cdef Py_ssize_t r = g.shape[0], m = idx.shape[0]
    out_arr = np.zeros((r, total))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, c
    for i in range(r):
        for c in range(m):
            out[i, idx[c]] += g[i, c]
    return out_arr
