# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled semi-discrete grouped convolution.

Feature layout is ``(groups, vertices, channels)``; patch entries are stored
CSR-style with ``ptr``. Entry ``e`` of vertex ``x`` reads neighbour
``nbr[e]`` from group ``(k + offs[e]) % N`` when producing group ``k``.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()

cdef enum:
    NMONO = 10


def gconv_forward(const cnp.int64_t[::1] ptr, const cnp.int64_t[::1] nbr,
                  const cnp.int64_t[::1] offs, const floating[::1] wn,
                  const floating[:, :, ::1] mono, const floating[:, :, ::1] inp,
                  const floating[:, :, ::1] W, floating[:, :, ::1] out):
    cdef Py_ssize_t N = inp.shape[0]
    cdef Py_ssize_t V = ptr.shape[0] - 1
    cdef Py_ssize_t C = inp.shape[2]
    cdef Py_ssize_t O = W.shape[0]
    cdef Py_ssize_t k, x, e, c, p, o, g, y
    cdef floating a[NMONO]
    cdef floating acc, f
    S_arr = np.empty((C, NMONO), dtype=np.asarray(inp).dtype)
    cdef floating[:, ::1] S = S_arr
    with nogil:
        for k in range(N):
            for x in range(V):
                for c in range(C):
                    for p in range(NMONO):
                        S[c, p] = 0
                for e in range(ptr[x], ptr[x + 1]):
                    g = (k + offs[e]) % N
                    y = nbr[e]
                    for p in range(NMONO):
                        a[p] = wn[e] * mono[k, e, p]
                    for c in range(C):
                        f = inp[g, y, c]
                        for p in range(NMONO):
                            S[c, p] += a[p] * f
                for o in range(O):
                    acc = 0
                    for c in range(C):
                        for p in range(NMONO):
                            acc = acc + W[o, c, p] * S[c, p]
                    out[k, x, o] = acc


def gconv_backward(const cnp.int64_t[::1] ptr, const cnp.int64_t[::1] nbr,
                   const cnp.int64_t[::1] offs, const floating[::1] wn,
                   const floating[:, :, ::1] mono, const floating[:, :, ::1] inp,
                   const floating[:, :, ::1] W, const floating[:, :, ::1] gout,
                   floating[:, :, ::1] ginp, floating[:, :, ::1] gW):
    cdef Py_ssize_t N = inp.shape[0]
    cdef Py_ssize_t V = ptr.shape[0] - 1
    cdef Py_ssize_t C = inp.shape[2]
    cdef Py_ssize_t O = W.shape[0]
    cdef Py_ssize_t k, x, e, c, p, o, g, y
    cdef floating a[NMONO]
    cdef floating acc, f, go
    dt = np.asarray(inp).dtype
    S_arr = np.empty((C, NMONO), dtype=dt)
    gS_arr = np.empty((C, NMONO), dtype=dt)
    cdef floating[:, ::1] S = S_arr
    cdef floating[:, ::1] gS = gS_arr
    with nogil:
        for k in range(N):
            for x in range(V):
                for c in range(C):
                    for p in range(NMONO):
                        S[c, p] = 0
                        gS[c, p] = 0
                for e in range(ptr[x], ptr[x + 1]):
                    g = (k + offs[e]) % N
                    y = nbr[e]
                    for p in range(NMONO):
                        a[p] = wn[e] * mono[k, e, p]
                    for c in range(C):
                        f = inp[g, y, c]
                        for p in range(NMONO):
                            S[c, p] += a[p] * f
                for o in range(O):
                    go = gout[k, x, o]
                    if go == 0:
                        continue
                    for c in range(C):
                        for p in range(NMONO):
                            gW[o, c, p] += go * S[c, p]
                            gS[c, p] += go * W[o, c, p]
                for e in range(ptr[x], ptr[x + 1]):
                    g = (k + offs[e]) % N
                    y = nbr[e]
                    for p in range(NMONO):
                        a[p] = wn[e] * mono[k, e, p]
                    for c in range(C):
                        acc = 0
                        for p in range(NMONO):
                            acc = acc + a[p] * gS[c, p]
                        ginp[g, y, c] += acc
