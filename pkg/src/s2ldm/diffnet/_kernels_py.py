"""Pure-numpy im2col / col2im (channels-last), used when the compiled kernels are unavailable."""
import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, h, w, c = x.shape
    oh, ow = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, oh, ow, k, k, c), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, :, ki, kj] = xp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
    return cols.reshape(n, oh, ow, k * k * c)


def col2im(cols, height, width, channels, k, stride, pad):
    n, oh, ow, width_cols = cols.shape
    if width_cols != k * k * channels:
        raise ValueError("column width does not match k * k * channels")
    blocks = cols.reshape(n, oh, ow, k, k, channels)
    xp = np.zeros((n, height + 2 * pad, width + 2 * pad, channels), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += blocks[:, :, :, ki, kj]
    return xp[:, pad:pad + height, pad:pad + width].copy()
