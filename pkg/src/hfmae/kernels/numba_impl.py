"""Numba-compiled hot kernels.

Plain sequential loops: deterministic accumulation order, compiled per
dtype on first use and cached on disk. Signatures mirror numpy_impl.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_forward(xp, w, out):
    B, Ci, Hp, Wp = xp.shape
    Co, _, k, _ = w.shape
    Ho, Wo = out.shape[2], out.shape[3]
    for b in range(B):
        for co in range(Co):
            for ci in range(Ci):
                for i in range(k):
                    for j in range(k):
                        wv = w[co, ci, i, j]
                        for y in range(Ho):
                            for x in range(Wo):
                                out[b, co, y, x] += wv * xp[b, ci, y + i, x + j]


@njit(cache=True)
def _conv2d_backward_input(g, w, dxp):
    B, Co, Ho, Wo = g.shape
    _, Ci, k, _ = w.shape
    for b in range(B):
        for co in range(Co):
            for ci in range(Ci):
                for i in range(k):
                    for j in range(k):
                        wv = w[co, ci, i, j]
                        for y in range(Ho):
                            for x in range(Wo):
                                dxp[b, ci, y + i, x + j] += wv * g[b, co, y, x]


@njit(cache=True)
def _conv2d_backward_kernel(xp, g, dw):
    B, Co, Ho, Wo = g.shape
    Ci = dw.shape[1]
    k = dw.shape[2]
    for b in range(B):
        for co in range(Co):
            for ci in range(Ci):
                for i in range(k):
                    for j in range(k):
                        acc = 0.0
                        for y in range(Ho):
                            for x in range(Wo):
                                acc += g[b, co, y, x] * xp[b, ci, y + i, x + j]
                        dw[co, ci, i, j] += acc


@njit(cache=True)
def _tconv2d_forward(x, w, s, out):
    B, Ci, H, W = x.shape
    _, Co, k, _ = w.shape
    for b in range(B):
        for ci in range(Ci):
            for co in range(Co):
                for i in range(k):
                    for j in range(k):
                        wv = w[ci, co, i, j]
                        for y in range(H):
                            for x_ in range(W):
                                out[b, co, y * s + i, x_ * s + j] += wv * x[b, ci, y, x_]


@njit(cache=True)
def _tconv2d_backward_input(g, w, s, dx):
    B, Ci, H, W = dx.shape
    _, Co, k, _ = w.shape
    for b in range(B):
        for ci in range(Ci):
            for co in range(Co):
                for i in range(k):
                    for j in range(k):
                        wv = w[ci, co, i, j]
                        for y in range(H):
                            for x_ in range(W):
                                dx[b, ci, y, x_] += wv * g[b, co, y * s + i, x_ * s + j]


@njit(cache=True)
def _tconv2d_backward_kernel(x, g, s, dw):
    B, Ci, H, W = x.shape
    Co = dw.shape[1]
    k = dw.shape[2]
    for b in range(B):
        for ci in range(Ci):
            for co in range(Co):
                for i in range(k):
                    for j in range(k):
                        acc = 0.0
                        for y in range(H):
                            for x_ in range(W):
                                acc += x[b, ci, y, x_] * g[b, co, y * s + i, x_ * s + j]
                        dw[ci, co, i, j] += acc


@njit(cache=True)
def _fnv1a64(buf):
    h = np.uint64(0xCBF29CE484222325)
    p = np.uint64(0x100000001B3)
    for i in range(buf.size):
        h = (h ^ np.uint64(buf[i])) * p
    return h


def conv2d_forward(x, w, padding):
    B, Ci, H, W = x.shape
    Co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, Co, H + 2 * padding - k + 1, W + 2 * padding - k + 1), dtype=x.dtype)
    _conv2d_forward(xp, w, out)
    return out


def conv2d_backward_input(g, w, padding, in_shape):
    B, Ci, H, W = in_shape
    dxp = np.zeros((B, Ci, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
    _conv2d_backward_input(np.ascontiguousarray(g), w, dxp)
    if padding:
        return np.ascontiguousarray(dxp[:, :, padding:-padding, padding:-padding])
    return dxp


def conv2d_backward_kernel(x, g, padding, k):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    dw = np.zeros((g.shape[1], x.shape[1], k, k), dtype=g.dtype)
    _conv2d_backward_kernel(xp, np.ascontiguousarray(g), dw)
    return dw


def tconv2d_forward(x, w, stride):
    B, Ci, H, W = x.shape
    _, Co, k, _ = w.shape
    out = np.zeros((B, Co, (H - 1) * stride + k, (W - 1) * stride + k), dtype=x.dtype)
    _tconv2d_forward(np.ascontiguousarray(x), w, stride, out)
    return out


def tconv2d_backward_input(g, w, stride, in_shape):
    dx = np.zeros(in_shape, dtype=g.dtype)
    _tconv2d_backward_input(np.ascontiguousarray(g), w, stride, dx)
    return dx


def tconv2d_backward_kernel(x, g, stride, k):
    dw = np.zeros((x.shape[1], g.shape[1], k, k), dtype=g.dtype)
    _tconv2d_backward_kernel(np.ascontiguousarray(x), np.ascontiguousarray(g), stride, dw)
    return dw


def fnv1a64(data):
    buf = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a64(buf))
