# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pairwise distance kernels; same contract as _pykernels."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def pairwise_sqdist(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    if b.shape[1] != d:
        raise ValueError("column mismatch")
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    acc = acc + t * t
                o[i, j] = acc
    return out


def pairwise_sqdist_backward(const double[:, ::1] g, const double[:, ::1] a,
                             const double[:, ::1] b):
    # factored form: gA = 2 (rowsum(G) A - G B), gB = 2 (colsum(G) B - G^T A)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double w, s
    ga = np.empty((n, d), dtype=np.float64)
    gb = np.zeros((m, d), dtype=np.float64)
    cdef double[:, ::1] gav = ga
    cdef double[:, ::1] gbv = gb
    cdef double* row
    cdef const double* src
    cdef double* dst
    colsum = np.zeros(m, dtype=np.float64)
    cdef double[::1] cs = colsum
    with nogil:
        for i in range(n):
            row = &gav[i, 0]
            s = 0.0
            for k in range(d):
                row[k] = 0.0
            for j in range(m):
                w = g[i, j]
                s = s + w
                cs[j] += w
                src = &b[j, 0]
                for k in range(d):
                    row[k] -= w * src[k]
            src = &a[i, 0]
            for k in range(d):
                row[k] = 2.0 * (s * src[k] + row[k])
        for i in range(n):
            src = &a[i, 0]
            for j in range(m):
                w = g[i, j]
                dst = &gbv[j, 0]
                for k in range(d):
                    dst[k] -= w * src[k]
        for j in range(m):
            dst = &gbv[j, 0]
            src = &b[j, 0]
            for k in range(d):
                dst[k] = 2.0 * (cs[j] * src[k] + dst[k])
    return ga, gb


def threshold_mask(const double[:, ::1] dist, double threshold, bint exclude_diagonal=True):
    cdef Py_ssize_t n = dist.shape[0], m = dist.shape[1]
    cdef Py_ssize_t i, j
    out = np.empty((n, m), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = dist[i, j] <= threshold
            if exclude_diagonal and i < m:
                o[i, i] = 0
    return out.view(np.bool_)
