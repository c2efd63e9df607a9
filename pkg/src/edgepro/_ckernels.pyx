# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (NCHW, float64).

Drop-in replacements for the functions in ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = H - KH + 1, OW = W - KW + 1
    out = np.empty((B, O, OH, OW), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t n, o, c, i, j, p, q
    cdef double s, wv
    with nogil:
        for n in range(B):
            for o in range(O):
                for i in range(OH):
                    for j in range(OW):
                        y[n, o, i, j] = b[o]
                for c in range(C):
                    for p in range(KH):
                        for q in range(KW):
                            wv = w[o, c, p, q]
                            for i in range(OH):
                                for j in range(OW):
                                    y[n, o, i, j] += wv * x[n, c, i + p, j + q]
    return out


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] gy):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = gy.shape[2], OW = gy.shape[3]
    gx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    gw_arr = np.zeros((O, C, KH, KW), dtype=np.float64)
    gb_arr = np.zeros(O, dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t n, o, c, i, j, p, q
    cdef double g, acc, wv
    with nogil:
        for n in range(B):
            for o in range(O):
                acc = 0.0
                for i in range(OH):
                    for j in range(OW):
                        acc = acc + gy[n, o, i, j]
                gb[o] += acc
                for c in range(C):
                    for p in range(KH):
                        for q in range(KW):
                            wv = w[o, c, p, q]
                            acc = 0.0
                            for i in range(OH):
                                for j in range(OW):
                                    g = gy[n, o, i, j]
                                    acc = acc + g * x[n, c, i + p, j + q]
                                    gx[n, c, i + p, j + q] += g * wv
                            gw[o, c, p, q] += acc
    return gx_arr, gw_arr, gb_arr


def maxpool2d_forward(const double[:, :, :, ::1] x, Py_ssize_t size, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H - size) // stride + 1, OW = (W - size) // stride + 1
    out = np.empty((B, C, OH, OW), dtype=np.float64)
    arg_arr = np.empty((B, C, OH, OW), dtype=np.int64)
    cdef double[:, :, :, ::1] y = out
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, c, i, j, p, q, r, s, best
    cdef double m, v
    with nogil:
        for n in range(B):
            for c in range(C):
                for i in range(OH):
                    for j in range(OW):
                        r = i * stride
                        s = j * stride
                        m = x[n, c, r, s]
                        best = r * W + s
                        for p in range(size):
                            for q in range(size):
                                v = x[n, c, r + p, s + q]
                                if v > m:
                                    m = v
                                    best = (r + p) * W + s + q
                        y[n, c, i, j] = m
                        arg[n, c, i, j] = best
    return out, arg_arr


def maxpool2d_backward(const double[:, :, :, ::1] gy, const cnp.int64_t[:, :, :, ::1] argmax,
                       tuple in_shape):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], OH = gy.shape[2], OW = gy.shape[3]
    cdef Py_ssize_t W = in_shape[3]
    gx_arr = np.zeros(in_shape, dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, c, i, j, k
    with nogil:
        for n in range(B):
            for c in range(C):
                for i in range(OH):
                    for j in range(OW):
                        k = argmax[n, c, i, j]
                        gx[n, c, k // W, k % W] += gy[n, c, i, j]
    return gx_arr
