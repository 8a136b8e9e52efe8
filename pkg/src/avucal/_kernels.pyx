# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-example kernels; see _kernels_py.py for the reference versions."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, ceil

cnp.import_array()


def entropy_rows(const double[:, ::1] probs, double eps):
    cdef Py_ssize_t n = probs.shape[0], k = probs.shape[1], i, j
    cdef double acc, v
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        acc = 0.0
        for j in range(k):
            v = probs[i, j]
            acc -= v * log(v + eps)
        o[i] = acc
    return out


# The count kernels index the four cells as 2 * incorrect + uncertain, which
# matches the (AC, AU, IC, IU) order and avoids data-dependent branches.

def hard_counts(const unsigned char[::1] correct, const double[::1] u, double u_th):
    cdef Py_ssize_t n = u.shape[0], i
    cdef long long c[4]
    c[0] = c[1] = c[2] = c[3] = 0
    for i in range(n):
        c[2 * (correct[i] == 0) + (u[i] > u_th)] += 1
    return np.array([c[0], c[1], c[2], c[3]], dtype=np.int64)


def soft_counts_forward(const double[::1] p, const double[::1] t,
                        const unsigned char[::1] correct, const unsigned char[::1] uncertain):
    cdef Py_ssize_t n = p.shape[0], i
    cdef int a, b
    cdef double c[4]
    c[0] = c[1] = c[2] = c[3] = 0.0
    for i in range(n):
        a = correct[i] != 0
        b = uncertain[i] != 0
        c[2 * (1 - a) + b] += (a * p[i] + (1 - a) * (1.0 - p[i])) * (b * t[i] + (1 - b) * (1.0 - t[i]))
    return np.array([c[0], c[1], c[2], c[3]])


def soft_counts_backward(const double[::1] p, const double[::1] t,
                         const unsigned char[::1] correct, const unsigned char[::1] uncertain,
                         const double[::1] g):
    cdef Py_ssize_t n = p.shape[0], i
    cdef int a, b
    cdef double gi
    dp_arr = np.empty(n)
    dt_arr = np.empty(n)
    cdef double[::1] dp = dp_arr
    cdef double[::1] dt = dt_arr
    for i in range(n):
        a = correct[i] != 0
        b = uncertain[i] != 0
        gi = g[2 * (1 - a) + b]
        dp[i] = (2 * a - 1) * gi * (b * t[i] + (1 - b) * (1.0 - t[i]))
        dt[i] = (2 * b - 1) * gi * (a * p[i] + (1 - a) * (1.0 - p[i]))
    return dp_arr, dt_arr


def binned_sums(const double[::1] values, const double[::1] targets, Py_ssize_t n_bins):
    cdef Py_ssize_t n = values.shape[0], i, b
    counts_arr = np.zeros(n_bins, dtype=np.int64)
    sv_arr = np.zeros(n_bins)
    st_arr = np.zeros(n_bins)
    cdef long long[::1] counts = counts_arr
    cdef double[::1] sv = sv_arr
    cdef double[::1] st = st_arr
    for i in range(n):
        b = <Py_ssize_t>ceil(values[i] * n_bins) - 1
        if b < 0:
            b = 0
        elif b >= n_bins:
            b = n_bins - 1
        counts[b] += 1
        sv[b] += values[i]
        st[b] += targets[i]
    return counts_arr, sv_arr, st_arr


def average_ranks(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i, j, k
    cdef cnp.intp_t[::1] order = np.argsort(x, kind="mergesort").astype(np.intp)
    ranks_arr = np.empty(n)
    cdef double[::1] ranks = ranks_arr
    cdef double avg
    i = 0
    while i < n:
        j = i + 1
        while j < n and x[order[j]] == x[order[i]]:
            j += 1
        avg = (i + j + 1) / 2.0
        for k in range(i, j):
            ranks[order[k]] = avg
        i = j
    return ranks_arr
