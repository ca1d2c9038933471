# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp

from unsupface._pykernels import UNIFORM_BINS

cnp.import_array()


def iou_matrix(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef double iw, ih, inter, union
    for i in range(n):
        for j in range(m):
            iw = min(A[i, 0] + A[i, 2], B[j, 0] + B[j, 2]) - max(A[i, 0], B[j, 0])
            ih = min(A[i, 1] + A[i, 3], B[j, 1] + B[j, 3]) - max(A[i, 1], B[j, 1])
            if iw < 0:
                iw = 0
            if ih < 0:
                ih = 0
            inter = iw * ih
            union = A[i, 2] * A[i, 3] + B[j, 2] * B[j, 3] - inter
            O[i, j] = inter / union
    return out


cdef inline Py_ssize_t _clamp(Py_ssize_t v, Py_ssize_t hi) nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def lbp_codes(gray):
    cdef double[:, ::1] g = np.ascontiguousarray(gray, dtype=np.float64)
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1], y, x, k
    out = np.empty((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] O = out
    cdef int dys[8]
    cdef int dxs[8]
    dys[:] = [-1, -1, -1, 0, 1, 1, 1, 0]
    dxs[:] = [-1, 0, 1, 1, 1, 0, -1, -1]
    cdef unsigned char code
    cdef double c
    with nogil:
        for y in range(h):
            for x in range(w):
                c = g[y, x]
                code = 0
                for k in range(8):
                    if g[_clamp(y + dys[k], h - 1), _clamp(x + dxs[k], w - 1)] >= c:
                        code |= <unsigned char>(1 << k)
                O[y, x] = code
    return out


def lbp_histograms(gray, Py_ssize_t cell):
    cdef unsigned char[:, ::1] codes = lbp_codes(gray)
    cdef short[::1] table = np.ascontiguousarray(UNIFORM_BINS, dtype=np.int16)
    cdef Py_ssize_t h = codes.shape[0], w = codes.shape[1]
    cdef Py_ssize_t ny = h // cell, nx = w // cell, y, x, b
    out = np.zeros(ny * nx * 58, dtype=np.float64)
    cdef double[::1] O = out
    with nogil:
        for y in range(ny * cell):
            for x in range(nx * cell):
                b = table[codes[y, x]]
                if b >= 0:
                    O[((y // cell) * nx + x // cell) * 58 + b] += 1.0
    return out
