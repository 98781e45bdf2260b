"""Pure-numpy implementations of the hot kernels.

Fallback path used when numba is unavailable or disabled via HFMAE_NO_NUMBA.
Convolutions are expressed as per-tap tensor contractions so they stay
vectorized; the FNV digest has no vectorizable form and degrades to a
Python byte loop here.
"""

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def conv2d_forward(x, w, padding):
    """Stride-1 cross-correlation. x: [B,Ci,H,W], w: [Co,Ci,k,k]."""
    B, Ci, H, W = x.shape
    Co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = H + 2 * padding - k + 1
    Wo = W + 2 * padding - k + 1
    out = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += np.einsum(
                "bchw,oc->bohw", xp[:, :, i : i + Ho, j : j + Wo], w[:, :, i, j]
            )
    return out


def conv2d_backward_input(g, w, padding, in_shape):
    B, Ci, H, W = in_shape
    Co, _, k, _ = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    dxp = np.zeros((B, Ci, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + Ho, j : j + Wo] += np.einsum(
                "bohw,oc->bchw", g, w[:, :, i, j]
            )
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d_backward_kernel(x, g, padding, k):
    Co = g.shape[1]
    Ci = x.shape[1]
    Ho, Wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    dw = np.zeros((Co, Ci, k, k), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dw[:, :, i, j] = np.einsum(
                "bohw,bchw->oc", g, xp[:, :, i : i + Ho, j : j + Wo]
            )
    return dw


def tconv2d_forward(x, w, stride):
    """Fractionally-strided convolution. x: [B,Ci,H,W], w: [Ci,Co,k,k]."""
    B, Ci, H, W = x.shape
    _, Co, k, _ = w.shape
    Ho = (H - 1) * stride + k
    Wo = (W - 1) * stride + k
    out = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (H - 1) * stride + 1 : stride,
                j : j + (W - 1) * stride + 1 : stride] += np.einsum(
                "bchw,cd->bdhw", x, w[:, :, i, j]
            )
    return out


def tconv2d_backward_input(g, w, stride, in_shape):
    B, Ci, H, W = in_shape
    _, Co, k, _ = w.shape
    dx = np.zeros(in_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gi = g[:, :, i : i + (H - 1) * stride + 1 : stride,
                   j : j + (W - 1) * stride + 1 : stride]
            dx += np.einsum("bdhw,cd->bchw", gi, w[:, :, i, j])
    return dx


def tconv2d_backward_kernel(x, g, stride, k):
    B, Ci, H, W = x.shape
    Co = g.shape[1]
    dw = np.zeros((Ci, Co, k, k), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gi = g[:, :, i : i + (H - 1) * stride + 1 : stride,
                   j : j + (W - 1) * stride + 1 : stride]
            dw[:, :, i, j] = np.einsum("bchw,bdhw->cd", x, gi)
    return dw


def fnv1a64(data):
    """64-bit FNV-1a over a byte string. Sequential by construction."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64_MASK
    return h
