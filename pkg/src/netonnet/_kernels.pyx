# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.

Every matmul here accumulates each output element over the inner dimension
in increasing index order, starting from 0.0. Vectorisation across the
output columns keeps that order intact, so a batched product is bit-identical
to a loop of single products.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64

cdef Py_ssize_t BLOCK_J = 256


cdef void _matmul_into(const f64[:, ::1] a, const f64[:, ::1] b, f64[:, ::1] out) noexcept nogil:
    # rows are processed four at a time to share each load of b; every output
    # element still accumulates over p in increasing order
    cdef Py_ssize_t r = a.shape[0], k = a.shape[1], c = b.shape[1]
    cdef Py_ssize_t i, p, j, j0, j1
    cdef f64 a0, a1, a2, a3, bv
    cdef f64 *o0
    cdef f64 *o1
    cdef f64 *o2
    cdef f64 *o3
    cdef const f64* brow
    for i in range(r):
        for j in range(c):
            out[i, j] = 0.0
    if c == 0:
        return
    j0 = 0
    while j0 < c:
        j1 = min(j0 + BLOCK_J, c)
        i = 0
        while i + 4 <= r:
            o0 = &out[i, 0]
            o1 = &out[i + 1, 0]
            o2 = &out[i + 2, 0]
            o3 = &out[i + 3, 0]
            for p in range(k):
                a0 = a[i, p]
                a1 = a[i + 1, p]
                a2 = a[i + 2, p]
                a3 = a[i + 3, p]
                brow = &b[p, 0]
                for j in range(j0, j1):
                    bv = brow[j]
                    o0[j] += a0 * bv
                    o1[j] += a1 * bv
                    o2[j] += a2 * bv
                    o3[j] += a3 * bv
            i += 4
        while i < r:
            o0 = &out[i, 0]
            for p in range(k):
                a0 = a[i, p]
                brow = &b[p, 0]
                for j in range(j0, j1):
                    o0[j] += a0 * brow[j]
            i += 1
        j0 = j1


def matmul(const f64[:, ::1] a, const f64[:, ::1] b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    cdef f64[:, ::1] ov = out
    with nogil:
        _matmul_into(a, b, ov)
    return out


def batched_matmul(const f64[:, :, ::1] x, const f64[:, :, ::1] w):
    cdef Py_ssize_t s, n = x.shape[0]
    if w.shape[0] != n or x.shape[2] != w.shape[1]:
        raise ValueError("stack or inner dimensions differ")
    out = np.empty((n, x.shape[1], w.shape[2]), dtype=np.float64)
    cdef f64[:, :, ::1] ov = out
    with nogil:
        for s in range(n):
            _matmul_into(x[s], w[s], ov[s])
    return out


def scatter_add_rows(f64[:, ::1] target, const i64[::1] index, const f64[:, ::1] rows):
    """target[index[t]] += rows[t], in order of t."""
    cdef Py_ssize_t t, j, n = index.shape[0], d = rows.shape[1], nrows = target.shape[0]
    cdef i64 r
    for t in range(n):
        r = index[t]
        if r < 0 or r >= nrows:
            raise IndexError(f"row index {r} out of range [0, {nrows})")
    with nogil:
        for t in range(n):
            r = index[t]
            for j in range(d):
                target[r, j] += rows[t, j]


def bi_interaction(const f64[:, :, ::1] u):
    """Pairwise product pooling 0.5 * ((sum u)^2 - sum u^2) over axis 1."""
    cdef Py_ssize_t b = u.shape[0], m = u.shape[1], d = u.shape[2]
    cdef Py_ssize_t i, f, j
    cdef f64 s, sq, v
    out = np.empty((b, d), dtype=np.float64)
    cdef f64[:, ::1] ov = out
    with nogil:
        for i in range(b):
            for j in range(d):
                s = 0.0
                sq = 0.0
                for f in range(m):
                    v = u[i, f, j]
                    s += v
                    sq += v * v
                ov[i, j] = 0.5 * (s * s - sq)
    return out


def bi_interaction_grad(const f64[:, :, ::1] u, const f64[:, ::1] g):
    """d/du_f = g * (sum_i u_i - u_f)."""
    cdef Py_ssize_t b = u.shape[0], m = u.shape[1], d = u.shape[2]
    cdef Py_ssize_t i, f, j
    cdef f64 s
    out = np.empty((b, m, d), dtype=np.float64)
    cdef f64[:, :, ::1] ov = out
    with nogil:
        for i in range(b):
            for j in range(d):
                s = 0.0
                for f in range(m):
                    s += u[i, f, j]
                for f in range(m):
                    ov[i, f, j] = g[i, j] * (s - u[i, f, j])
    return out
