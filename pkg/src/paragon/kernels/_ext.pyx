# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ranking kernels; the NumPy twin lives in _py.py."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, log2, pow

cnp.import_array()


def alpha_dcg_at_k(y_ranked, double alpha, int k):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.ascontiguousarray(y_ranked, dtype=np.float64)
    cdef int n = y.shape[0]
    cdef int m = y.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cov = np.zeros(m)
    cdef double total = 0.0, gain
    cdef int p, l, top = min(k, n)
    for p in range(top):
        gain = 0.0
        for l in range(m):
            if y[p, l] != 0.0:
                gain += y[p, l] * pow(1.0 - alpha, cov[l])
        total += gain / log2(2.0 + p)
        for l in range(m):
            cov[l] += y[p, l]
    return total


def ideal_alpha_dcg_at_k(y_in, double alpha, int k):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef int n = y.shape[0]
    cdef int m = y.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cov = np.zeros(m)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] used = np.zeros(n, dtype=np.uint8)
    cdef double total = 0.0, gain, best_gain
    cdef int p, i, l, best, top = min(k, n)
    for p in range(top):
        best = -1
        best_gain = -INFINITY
        for i in range(n):
            if used[i]:
                continue
            gain = 0.0
            for l in range(m):
                if y[i, l] != 0.0:
                    gain += y[i, l] * pow(1.0 - alpha, cov[l])
            if gain > best_gain:
                best_gain = gain
                best = i
        total += best_gain / log2(2.0 + p)
        for l in range(m):
            cov[l] += y[best, l]
        used[best] = 1
    return total


def jaccard_matrix(y_in):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef int n = y.shape[0]
    cdef int m = y.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sim = np.zeros((n, n))
    cdef double inter, union_, si, sj
    cdef int i, j, l
    for i in range(n):
        si = 0.0
        for l in range(m):
            si += y[i, l]
        for j in range(i, n):
            inter = 0.0
            sj = 0.0
            for l in range(m):
                inter += y[i, l] * y[j, l]
                sj += y[j, l]
            union_ = si + sj - inter
            if union_ > 0.0:
                sim[i, j] = inter / union_
                sim[j, i] = sim[i, j]
    return sim


def mmr_select(rel_in, y_in, double lam, int k):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rel = np.ascontiguousarray(rel_in, dtype=np.float64)
    cdef int n = rel.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds candidate count {n}")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sim = jaccard_matrix(y_in)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] max_sim = np.zeros(n)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] used = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(k, dtype=np.int64)
    cdef double score, best_score
    cdef int p, i, best
    for p in range(k):
        best = -1
        best_score = 0.0
        for i in range(n):
            if used[i]:
                continue
            score = lam * rel[i] - (1.0 - lam) * max_sim[i]
            if best < 0 or score > best_score + 1e-12 or (
                score >= best_score - 1e-12 and rel[i] > rel[best] + 1e-12
            ):
                best = i
                best_score = score
        out[p] = best
        used[best] = 1
        for i in range(n):
            if sim[best, i] > max_sim[i]:
                max_sim[i] = sim[best, i]
    return out
