# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled multi-head single-query attention kernels.

Same contract as ``_attention_py``; loops are written so each (item, head)
pair touches contiguous memory only.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def attention_forward(double[:, ::1] q, double[:, :, ::1] k, double[:, :, ::1] v,
                      cnp.int64_t[::1] lengths, int heads):
    cdef Py_ssize_t b = k.shape[0], s = k.shape[1], d = k.shape[2]
    cdef Py_ssize_t dh = d // heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    out_arr = np.zeros((b, d), dtype=np.float64)
    w_arr = np.zeros((b, heads, s), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, :, ::1] w = w_arr
    cdef Py_ssize_t i, h, j, t, off, n
    cdef double acc, mx, tot
    for i in range(b):
        n = lengths[i]
        for h in range(heads):
            off = h * dh
            mx = -INFINITY
            for j in range(n):
                acc = 0.0
                for t in range(dh):
                    acc = acc + q[i, off + t] * k[i, j, off + t]
                acc = acc * scale
                w[i, h, j] = acc
                if acc > mx:
                    mx = acc
            tot = 0.0
            for j in range(n):
                w[i, h, j] = exp(w[i, h, j] - mx)
                tot = tot + w[i, h, j]
            for j in range(n):
                w[i, h, j] = w[i, h, j] / tot
                for t in range(dh):
                    out[i, off + t] += w[i, h, j] * v[i, j, off + t]
    return out_arr, w_arr


def attention_backward(double[:, ::1] grad_out, double[:, ::1] q, double[:, :, ::1] k,
                       double[:, :, ::1] v, double[:, :, ::1] attn, cnp.int64_t[::1] lengths,
                       int heads):
    cdef Py_ssize_t b = k.shape[0], s = k.shape[1], d = k.shape[2]
    cdef Py_ssize_t dh = d // heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    gq_arr = np.zeros((b, d), dtype=np.float64)
    gk_arr = np.zeros((b, s, d), dtype=np.float64)
    gv_arr = np.zeros((b, s, d), dtype=np.float64)
    gw_arr = np.zeros(s, dtype=np.float64)
    cdef double[:, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef double[:, :, ::1] gv = gv_arr
    cdef double[::1] gw = gw_arr
    cdef Py_ssize_t i, h, j, t, off, n
    cdef double acc, dot, a, gs
    for i in range(b):
        n = lengths[i]
        for h in range(heads):
            off = h * dh
            dot = 0.0
            for j in range(n):
                a = attn[i, h, j]
                acc = 0.0
                for t in range(dh):
                    acc = acc + grad_out[i, off + t] * v[i, j, off + t]
                    gv[i, j, off + t] = a * grad_out[i, off + t]
                gw[j] = acc
                dot = dot + a * acc
            for j in range(n):
                gs = attn[i, h, j] * (gw[j] - dot) * scale
                for t in range(dh):
                    gq[i, off + t] += gs * k[i, j, off + t]
                    gk[i, j, off + t] = gs * q[i, off + t]
    return gq_arr, gk_arr, gv_arr
