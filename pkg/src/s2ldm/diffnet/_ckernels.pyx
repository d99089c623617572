# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter kernels behind the convolution layers.

Channels-last layout: ``x[n, h, w, c]`` and ``cols[n, oh, ow, (ki, kj, c)]``,
identical to ``_kernels_py``.
"""
cimport cython
import numpy as np


def im2col(cython.floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n_batch = x.shape[0], height = x.shape[1]
    cdef Py_ssize_t width = x.shape[2], channels = x.shape[3]
    cdef Py_ssize_t out_h = (height + 2 * pad - k) // stride + 1
    cdef Py_ssize_t out_w = (width + 2 * pad - k) // stride + 1
    dtype = np.float32 if cython.floating is float else np.float64
    cols_arr = np.zeros((n_batch, out_h, out_w, k * k * channels), dtype=dtype)
    cdef cython.floating[:, :, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, ki, kj, oh, ow, ih, iw, base
    with nogil:
        for n in range(n_batch):
            for oh in range(out_h):
                for ow in range(out_w):
                    for ki in range(k):
                        ih = oh * stride + ki - pad
                        if ih < 0 or ih >= height:
                            continue
                        for kj in range(k):
                            iw = ow * stride + kj - pad
                            if iw < 0 or iw >= width:
                                continue
                            base = (ki * k + kj) * channels
                            for c in range(channels):
                                cols[n, oh, ow, base + c] = x[n, ih, iw, c]
    return cols_arr


def col2im(cython.floating[:, :, :, ::1] cols, Py_ssize_t height, Py_ssize_t width,
           Py_ssize_t channels, int k, int stride, int pad):
    cdef Py_ssize_t n_batch = cols.shape[0], out_h = cols.shape[1], out_w = cols.shape[2]
    if cols.shape[3] != k * k * channels:
        raise ValueError("column width does not match k * k * channels")
    dtype = np.float32 if cython.floating is float else np.float64
    x_arr = np.zeros((n_batch, height, width, channels), dtype=dtype)
    cdef cython.floating[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t n, c, ki, kj, oh, ow, ih, iw, base
    with nogil:
        for n in range(n_batch):
            for oh in range(out_h):
                for ow in range(out_w):
                    for ki in range(k):
                        ih = oh * stride + ki - pad
                        if ih < 0 or ih >= height:
                            continue
                        for kj in range(k):
                            iw = ow * stride + kj - pad
                            if iw < 0 or iw >= width:
                                continue
                            base = (ki * k + kj) * channels
                            for c in range(channels):
                                x[n, ih, iw, c] += cols[n, oh, ow, base + c]
    return x_arr
