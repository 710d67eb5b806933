# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``; identical signatures and results."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline i64 _min3(i64 a, i64 b, i64 c) nogil:
    if b < a:
        a = b
    if c < a:
        a = c
    return a


cdef void _forest(const i64[::1] la, const i64[::1] ma, const i64[::1] lb,
                  const i64[::1] mb, i64[:, ::1] td, i64[:, ::1] fd,
                  Py_ssize_t i, Py_ssize_t j, bint fill) nogil:
    cdef Py_ssize_t li = ma[i], lj = mb[j]
    cdef Py_ssize_t rows = i - li + 2, cols = j - lj + 2
    cdef Py_ssize_t x, y, a, b
    cdef i64 best
    fd[0, 0] = 0
    for x in range(1, rows):
        fd[x, 0] = fd[x - 1, 0] + 1
    for y in range(1, cols):
        fd[0, y] = fd[0, y - 1] + 1
    for x in range(1, rows):
        a = li + x - 1
        for y in range(1, cols):
            b = lj + y - 1
            if ma[a] == li and mb[b] == lj:
                best = _min3(fd[x - 1, y] + 1, fd[x, y - 1] + 1,
                             fd[x - 1, y - 1] + (la[a] != lb[b]))
                fd[x, y] = best
                if fill:
                    td[a, b] = best
            else:
                fd[x, y] = _min3(fd[x - 1, y] + 1, fd[x, y - 1] + 1,
                                 fd[ma[a] - li, mb[b] - lj] + td[a, b])


def forest_table(la, lmld_a, lb, lmld_b, td, Py_ssize_t i, Py_ssize_t j, bint fill):
    cdef const i64[::1] la_v = np.ascontiguousarray(la, dtype=np.int64)
    cdef const i64[::1] ma_v = np.ascontiguousarray(lmld_a, dtype=np.int64)
    cdef const i64[::1] lb_v = np.ascontiguousarray(lb, dtype=np.int64)
    cdef const i64[::1] mb_v = np.ascontiguousarray(lmld_b, dtype=np.int64)
    cdef i64[:, ::1] td_v = td
    rows = i - ma_v[i] + 2
    cols = j - mb_v[j] + 2
    out = np.zeros((rows, cols), dtype=np.int64)
    cdef i64[:, ::1] fd_v = out
    _forest(la_v, ma_v, lb_v, mb_v, td_v, fd_v, i, j, fill)
    return out


def tree_dist_table(la, lmld_a, kr_a, lb, lmld_b, kr_b):
    cdef const i64[::1] la_v = np.ascontiguousarray(la, dtype=np.int64)
    cdef const i64[::1] ma_v = np.ascontiguousarray(lmld_a, dtype=np.int64)
    cdef const i64[::1] ka_v = np.ascontiguousarray(kr_a, dtype=np.int64)
    cdef const i64[::1] lb_v = np.ascontiguousarray(lb, dtype=np.int64)
    cdef const i64[::1] mb_v = np.ascontiguousarray(lmld_b, dtype=np.int64)
    cdef const i64[::1] kb_v = np.ascontiguousarray(kr_b, dtype=np.int64)
    cdef Py_ssize_t n = la_v.shape[0], m = lb_v.shape[0]
    td = np.zeros((n, m), dtype=np.int64)
    fd = np.zeros((n + 1, m + 1), dtype=np.int64)
    cdef i64[:, ::1] td_v = td
    cdef i64[:, ::1] fd_v = fd
    cdef Py_ssize_t p, q
    with nogil:
        for p in range(ka_v.shape[0]):
            for q in range(kb_v.shape[0]):
                _forest(la_v, ma_v, lb_v, mb_v, td_v, fd_v, ka_v[p], kb_v[q], True)
    return td


def levenshtein_table(a, b):
    cdef const i64[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef const i64[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.zeros((n + 1, m + 1), dtype=np.int64)
    cdef i64[:, ::1] d = out
    with nogil:
        for i in range(n + 1):
            d[i, 0] = i
        for j in range(m + 1):
            d[0, j] = j
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                d[i, j] = _min3(d[i - 1, j - 1] + (av[i - 1] != bv[j - 1]),
                                d[i - 1, j] + 1, d[i, j - 1] + 1)
    return out
