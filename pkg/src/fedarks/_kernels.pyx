# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; drop-in replacements for ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, NAN

cnp.import_array()


def weighted_sum(const double[:, ::1] stacked, const double[::1] weights):
    cdef Py_ssize_t K = stacked.shape[0], N = stacked.shape[1], k, i
    out_arr = np.zeros(N, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double w
    for k in range(K):
        w = weights[k]
        for i in range(N):
            out[i] = out[i] + w * stacked[k, i]
    return out_arr


def pairwise_sqdist(a, b):
    cdef const double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], d = A.shape[1], i, j, t
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double s, diff
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(d):
                diff = A[i, t] - B[j, t]
                s += diff * diff
            out[i, j] = s
    return out_arr


def batch_hard_mine(dist, labels, double margin):
    cdef const double[:, ::1] D = np.ascontiguousarray(dist, dtype=np.float64)
    cdef const long long[::1] y = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = D.shape[0], i, j, p, q
    cdef double best_p, best_n, v
    losses_arr = np.empty(n, dtype=np.float64)
    pos_arr = np.empty(n, dtype=np.int64)
    neg_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] losses = losses_arr
    cdef long long[::1] pos = pos_arr
    cdef long long[::1] neg = neg_arr
    for i in range(n):
        p = -1
        q = -1
        best_p = -INFINITY
        best_n = INFINITY
        for j in range(n):
            if y[j] == y[i]:
                if j != i and (p < 0 or D[i, j] > best_p):
                    best_p = D[i, j]
                    p = j
            elif q < 0 or D[i, j] < best_n:
                best_n = D[i, j]
                q = j
        if p < 0 or q < 0:
            raise ValueError("every anchor needs at least one positive and one negative")
        v = margin + best_p - best_n
        losses[i] = v if v > 0.0 else 0.0
        pos[i] = p
        neg[i] = q
    return losses_arr, pos_arr, neg_arr


def rank_queries(dist, q_ids, g_ids, q_cams, g_cams):
    cdef const long long[:, ::1] order = np.ascontiguousarray(
        np.argsort(dist, axis=1, kind="stable"), dtype=np.int64)
    cdef const long long[::1] qi = np.ascontiguousarray(q_ids, dtype=np.int64)
    cdef const long long[::1] gi = np.ascontiguousarray(g_ids, dtype=np.int64)
    cdef const long long[::1] qc = np.ascontiguousarray(q_cams, dtype=np.int64)
    cdef const long long[::1] gc = np.ascontiguousarray(g_cams, dtype=np.int64)
    cdef Py_ssize_t num_q = order.shape[0], num_g = order.shape[1], q, j, g, r
    ap_arr = np.empty(num_q, dtype=np.float64)
    first_arr = np.full(num_q, -1, dtype=np.int64)
    cdef double[::1] ap = ap_arr
    cdef long long[::1] first = first_arr
    cdef long long hits
    cdef double total
    for q in range(num_q):
        hits = 0
        total = 0.0
        r = 0
        for j in range(num_g):
            g = order[q, j]
            if gi[g] == qi[q] and gc[g] == qc[q]:
                continue
            if gi[g] == qi[q]:
                hits += 1
                total += <double>hits / <double>(r + 1)
                if hits == 1:
                    first[q] = r
            r += 1
        ap[q] = total / hits if hits > 0 else NAN
    return ap_arr, first_arr
