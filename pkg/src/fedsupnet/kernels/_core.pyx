# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution inner loops: im2col/col2im and depthwise conv.

Mirrors fedsupnet.kernels._fallback. All reductions are sequential so
results are bit-stable for a given build.
"""

import numpy as np

from cython cimport floating


def im2col(floating[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], hp = x.shape[2], wp = x.shape[3]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((b, c * k * k, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t bi, ci, i, j, hi, wi, row
    for bi in range(b):
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    for hi in range(ho):
                        for wi in range(wo):
                            cols[bi, row, hi * wo + wi] = x[bi, ci, hi * stride + i, wi * stride + j]
    return cols_arr


def col2im(floating[:, :, ::1] cols, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp, int k, int stride):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((b, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, hi, wi, row
    for bi in range(b):
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    for hi in range(ho):
                        for wi in range(wo):
                            out[bi, ci, hi * stride + i, wi * stride + j] += cols[bi, row, hi * wo + wi]
    return out_arr


def depthwise_forward(floating[:, :, :, ::1] x, floating[:, :, ::1] w, int stride):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], hp = x.shape[2], wp = x.shape[3]
    cdef int k = <int> w.shape[1]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((b, c, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating acc
    cdef Py_ssize_t bi, ci, i, j, hi, wi, h0, w0
    for bi in range(b):
        for ci in range(c):
            for hi in range(ho):
                h0 = hi * stride
                for wi in range(wo):
                    w0 = wi * stride
                    acc = 0
                    for i in range(k):
                        for j in range(k):
                            acc += x[bi, ci, h0 + i, w0 + j] * w[ci, i, j]
                    out[bi, ci, hi, wi] = acc
    return out_arr


def depthwise_backward(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] x,
                       floating[:, :, ::1] w, int stride):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], hp = x.shape[2], wp = x.shape[3]
    cdef int k = <int> w.shape[1]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((b, c, hp, wp), dtype=dtype)
    gw_arr = np.zeros((c, k, k), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[:, :, ::1] gw = gw_arr
    cdef floating g
    cdef Py_ssize_t bi, ci, i, j, hi, wi, h0, w0
    for bi in range(b):
        for ci in range(c):
            for hi in range(ho):
                h0 = hi * stride
                for wi in range(wo):
                    w0 = wi * stride
                    g = gout[bi, ci, hi, wi]
                    for i in range(k):
                        for j in range(k):
                            gx[bi, ci, h0 + i, w0 + j] += g * w[ci, i, j]
                            gw[ci, i, j] += g * x[bi, ci, h0 + i, w0 + j]
    return gx_arr, gw_arr
