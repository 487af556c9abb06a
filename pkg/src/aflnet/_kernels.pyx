# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every routine here has a bit-identical twin in ``_fallback.py``.  Products
accumulate each output element over the inner index in ascending order,
starting from 0.0, so results equal a naive triple loop exactly.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _mm(const double* a, const double* b, double* out,
              Py_ssize_t n, Py_ssize_t m, Py_ssize_t p) noexcept nogil:
    # out must be zeroed; rows are processed four at a time to reuse b rows,
    # which leaves the per-element k order untouched
    cdef Py_ssize_t i = 0, k, j
    cdef double a0, a1, a2, a3, bk
    cdef double* o0
    cdef double* o1
    cdef double* o2
    cdef double* o3
    cdef const double* brow
    while i + 4 <= n:
        o0 = out + i * p
        o1 = o0 + p
        o2 = o1 + p
        o3 = o2 + p
        for k in range(m):
            a0 = a[i * m + k]
            a1 = a[(i + 1) * m + k]
            a2 = a[(i + 2) * m + k]
            a3 = a[(i + 3) * m + k]
            brow = b + k * p
            for j in range(p):
                bk = brow[j]
                o0[j] += a0 * bk
                o1[j] += a1 * bk
                o2[j] += a2 * bk
                o3[j] += a3 * bk
        i += 4
    while i < n:
        o0 = out + i * p
        for k in range(m):
            a0 = a[i * m + k]
            brow = b + k * p
            for j in range(p):
                o0[j] += a0 * brow[j]
        i += 1


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], p = b.shape[1]
    if b.shape[0] != m:
        raise ValueError(f"matmul shape mismatch: ({n}, {m}) x ({b.shape[0]}, {p})")
    out = np.zeros((n, p), dtype=np.float64)
    cdef double[:, ::1] o = out
    if n == 0 or m == 0 or p == 0:
        return out
    with nogil:
        _mm(&a[0, 0], &b[0, 0], &o[0, 0], n, m, p)
    return out


def bmm(const double[:, :, ::1] a, const double[:, :, ::1] b):
    cdef Py_ssize_t g = a.shape[0], n = a.shape[1], m = a.shape[2], p = b.shape[2]
    cdef Py_ssize_t t
    if b.shape[0] != g or b.shape[1] != m:
        raise ValueError(
            f"bmm shape mismatch: ({g}, {n}, {m}) x ({b.shape[0]}, {b.shape[1]}, {p})")
    out = np.zeros((g, n, p), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    if g == 0 or n == 0 or m == 0 or p == 0:
        return out
    with nogil:
        for t in range(g):
            _mm(&a[t, 0, 0], &b[t, 0, 0], &o[t, 0, 0], n, m, p)
    return out


def ahc_merges(const double[:, ::1] scores):
    """Full average-linkage merge sequence on a symmetric similarity matrix.

    Returns ``(pairs, sims)``: row ``s`` of ``pairs`` is ``(keep, absorbed)``
    with ``keep < absorbed``; clusters are named by their lowest member.
    """
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t step, i, j, c, bi, bj
    cdef double best, v, si, sj
    sim_arr = np.array(scores, dtype=np.float64, copy=True)
    size_arr = np.ones(n, dtype=np.float64)
    active_arr = np.ones(n, dtype=np.uint8)
    pairs = np.zeros((max(n - 1, 0), 2), dtype=np.intp)
    sims = np.zeros(max(n - 1, 0), dtype=np.float64)
    cdef double[:, ::1] sim = sim_arr
    cdef double[::1] size = size_arr
    cdef unsigned char[::1] active = active_arr
    cdef Py_ssize_t[:, ::1] pr = pairs
    cdef double[::1] hs = sims
    with nogil:
        for step in range(n - 1):
            bi = -1
            bj = -1
            best = 0.0
            for i in range(n):
                if not active[i]:
                    continue
                for j in range(i + 1, n):
                    if active[j] and (bi < 0 or sim[i, j] > best):
                        best = sim[i, j]
                        bi = i
                        bj = j
            si = size[bi]
            sj = size[bj]
            for c in range(n):
                if active[c] and c != bi and c != bj:
                    v = (si * sim[bi, c] + sj * sim[bj, c]) / (si + sj)
                    sim[bi, c] = v
                    sim[c, bi] = v
            size[bi] = si + sj
            active[bj] = 0
            pr[step, 0] = bi
            pr[step, 1] = bj
            hs[step] = best
    return pairs, sims
