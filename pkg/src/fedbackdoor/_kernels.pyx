# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled versions of the aggregation and crafting kernels.

Semantics match ``_fallback`` exactly; see that module for documentation.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, ceil
from libcpp.vector cimport vector
from libcpp.pair cimport pair
from libcpp.algorithm cimport sort, nth_element

cnp.import_array()


def pairwise_sq_dists(const double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j, c
    cdef double s, t
    D = np.zeros((n, n))
    cdef double[:, ::1] Dv = D
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for c in range(d):
                t = X[i, c] - X[j, c]
                s += t * t
            Dv[i, j] = s
            Dv[j, i] = s
    return D


def krum_scores(const double[:, ::1] X, Py_ssize_t m):
    cdef Py_ssize_t n = X.shape[0], i, j, q
    D = pairwise_sq_dists(X)
    cdef double[:, ::1] Dv = D
    scores = np.empty(n)
    cdef double[::1] sv = scores
    cdef vector[double] row
    cdef double s
    for i in range(n):
        row.clear()
        for j in range(n):
            if j != i:
                row.push_back(Dv[i, j])
        sort(row.begin(), row.end())
        s = 0.0
        for q in range(m):
            s += row[q]
        sv[i] = s
    return scores


def coord_median(const double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, c
    cdef vector[double] col
    cdef double lo, hi
    out = np.empty(d)
    cdef double[::1] ov = out
    col.resize(n)
    for c in range(d):
        for i in range(n):
            col[i] = X[i, c]
        nth_element(col.begin(), col.begin() + n // 2, col.end())
        hi = col[n // 2]
        if n % 2 == 1:
            ov[c] = hi
        else:
            nth_element(col.begin(), col.begin() + n // 2 - 1, col.begin() + n // 2)
            lo = col[n // 2 - 1]
            ov[c] = (lo + hi) / 2.0
    return out


def clip_rows(const double[:, ::1] X, double C):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, c
    cdef double s, scale
    out = np.array(X, dtype=np.float64, copy=True)
    cdef double[:, ::1] ov = out
    for i in range(n):
        s = 0.0
        for c in range(d):
            s += ov[i, c] * ov[i, c]
        s = sqrt(s)
        if s > C:
            scale = C / s
            for c in range(d):
                ov[i, c] *= scale
    return out


cdef bint _desc_then_index(const pair[double, Py_ssize_t]& a,
                           const pair[double, Py_ssize_t]& b) noexcept nogil:
    if a.first != b.first:
        return a.first > b.first
    return a.second < b.second


cdef void _select(const double[::1] score, Py_ssize_t lo, Py_ssize_t hi,
                  Py_ssize_t k, vector[Py_ssize_t]& picked) noexcept nogil:
    cdef vector[pair[double, Py_ssize_t]] buf
    cdef Py_ssize_t i
    picked.clear()
    for i in range(lo, hi):
        buf.push_back(pair[double, Py_ssize_t](score[i], i))
    sort(buf.begin(), buf.end(), _desc_then_index)
    for i in range(k):
        picked.push_back(buf[i].second)


def topk_craft(const double[::1] g_tilde, const double[::1] g,
               const cnp.int64_t[::1] offsets, double alpha, double beta):
    cdef Py_ssize_t n = g_tilde.shape[0], s, lo, hi, size, k, q, i
    diff = np.empty(n)
    cdef double[::1] dv = diff
    for i in range(n):
        dv[i] = fabs(g_tilde[i] - g[i])
    out = np.array(g_tilde, dtype=np.float64, copy=True)
    cdef double[::1] ov = out
    cdef vector[Py_ssize_t] picked
    for s in range(offsets.shape[0] - 1):
        lo = offsets[s]
        hi = offsets[s + 1]
        size = hi - lo
        k = <Py_ssize_t>ceil(alpha * size)
        if k > size:
            k = size
        if k == 0:
            continue
        _select(dv, lo, hi, k, picked)
        for q in range(k):
            i = picked[q]
            ov[i] = g_tilde[i] - beta * (g_tilde[i] - g[i])
    return out


def topk_mask(const double[::1] values, const cnp.int64_t[::1] offsets, Py_ssize_t k):
    cdef Py_ssize_t n = values.shape[0], s, lo, hi, q, i, kk
    absval = np.empty(n)
    cdef double[::1] av = absval
    for i in range(n):
        av[i] = fabs(values[i])
    mask = np.zeros(n, dtype=bool)
    cdef cnp.uint8_t[::1] mv = mask.view(np.uint8)
    cdef vector[Py_ssize_t] picked
    if k == 0:
        return mask
    for s in range(offsets.shape[0] - 1):
        lo = offsets[s]
        hi = offsets[s + 1]
        kk = min(k, hi - lo)
        _select(av, lo, hi, kk, picked)
        for q in range(kk):
            mv[picked[q]] = 1
    return mask
