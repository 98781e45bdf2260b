"""Dense n-dimensional tensors with reverse-mode autodiff on numpy buffers.

Dynamic tape, first-order gradients only. Training runs in float32; switch
the whole stack to float64 (``use_dtype(np.float64)``) for finite-difference
gradient checking. All reductions happen in numpy's fixed sequential order,
so identical inputs and seeds give bit-identical results on one machine.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_DEBUG = bool(os.environ.get("HFMAE_DEBUG"))


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype):
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DTYPE = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (64-bit mode for grad checks)."""
    global _DTYPE
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


def set_debug(flag):
    """Debug mode checks every forward op for NaN/Inf outputs."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextmanager
def no_grad():
    """Disable graph construction (evaluation / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy buffer plus optional gradient and tape node.

    ``backward()`` accumulates into ``grad`` for every reachable node that
    requires grad; repeated calls without ``zero_grad`` keep accumulating.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None, _op=""):
        if isinstance(data, np.ndarray):
            if data.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
                data = data.astype(_DTYPE)
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{grad})"

    # arithmetic sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        """Reverse-mode sweep from a scalar; visits each node once."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._bwd is None:
                continue
            for p, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in flowing:
                    flowing[id(p)] = flowing[id(p)] + pg
                else:
                    flowing[id(p)] = pg


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _from_op(out_data, parents, bwd, op):
    if _DEBUG and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(out_data, requires_grad=True, _parents=parents, _bwd=bwd, _op=op)
    return Tensor(out_data)


def _unbroadcast(g, shape):
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ----------------------------------------------------------


def add(a, b):
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(out, (a, b), bwd, "add")


def sub(a, b):
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _from_op(out, (a, b), bwd, "sub")


def mul(a, b):
    out = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(out, (a, b), bwd, "mul")


def div(a, b):
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _from_op(out, (a, b), bwd, "div")


def neg(a):
    return _from_op(-a.data, (a,), lambda g: (-g,), "neg")


def pow_scalar(a, p):
    out = a.data**p

    def bwd(g):
        return (g * p * a.data ** (p - 1),)

    return _from_op(out, (a,), bwd, "pow")


def texp(a):
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,), "exp")


def tlog(a):
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tsqrt(a):
    out = np.sqrt(a.data)
    return _from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def ttanh(a):
    out = np.tanh(a.data)
    return _from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a):
    """Tanh approximation of the Gaussian error linear unit."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _from_op(out, (a,), bwd, "gelu")


# shape manipulation ---------------------------------------------------


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _from_op(out, (a,), bwd, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _from_op(a.data.transpose(axes), (a,), bwd, "transpose")


def getitem(a, idx):
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _from_op(out, (a,), bwd, "getitem")


def concat(tensors, axis):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(out, tuple(tensors), bwd, "concat")


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape)

    def bwd(g):
        return (_unbroadcast(g, a.data.shape),)

    return _from_op(out, (a,), bwd, "broadcast_to")


# reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _from_op(out, (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# matrix / attention ---------------------------------------------------


def matmul(a, b):
    """Matrix product; supports 2-D and stacked operands via numpy rules."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _from_op(out, (a, b), bwd, "matmul")


def softmax_lastdim(x):
    """Numerically stable softmax along the last axis."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out,)

    return _from_op(out, (x,), bwd, "softmax")


def log_softmax_lastdim(x):
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _from_op(out, (x,), bwd, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis, then scale/shift by gamma/beta."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm parameter shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _from_op(out, (x, gamma, beta), bwd, "layer_norm")


# indexed access -------------------------------------------------------


def gather_tokens(x, idx):
    """Select rows per batch element: x [B,N,D], idx [B,K] -> [B,K,D]."""
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)
    B = x.data.shape[0]

    def bwd(g):
        ga = np.zeros_like(x.data)
        np.add.at(ga, (np.arange(B)[:, None], idx), g)
        return (ga,)

    return _from_op(out, (x,), bwd, "gather_tokens")


def embedding(table, ids):
    """Row lookup: table [G,D], ids [N] -> [N,D]; scatter-add backward."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _from_op(out, (table,), bwd, "embedding")


# convolutions ---------------------------------------------------------


def conv2d(x, w, b=None, padding=0):
    """Stride-1 cross-correlation: x [B,Ci,H,W], w [Co,Ci,k,k]."""
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}"
        )
    k = w.data.shape[2]
    out = kernels.conv2d_forward(x.data, w.data, padding)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.conv2d_backward_input(g, w.data, padding, x.data.shape)
        if w.requires_grad:
            gw = kernels.conv2d_backward_kernel(x.data, g, padding, k)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _from_op(out, parents, bwd, "conv2d")


def transposed_conv2d(x, w, b=None, stride=1):
    """Fractionally-strided convolution, no padding or output padding.

    x: [B,c_in,h,w] (or unbatched [c_in,h,w]); w: [c_in,c_out,k,k];
    output spatial extent is (h-1)*stride + k.
    """
    if stride < 1:
        raise ValueError("transposed_conv2d stride must be >= 1")
    if w.data.shape[2] < 1:
        raise ValueError("transposed_conv2d kernel extent must be >= 1")
    squeeze = x.data.ndim == 3
    xin = reshape(x, (1,) + x.data.shape) if squeeze else x
    if xin.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"transposed_conv2d channel mismatch: input {x.data.shape} "
            f"vs kernel {w.data.shape}"
        )
    k = w.data.shape[2]
    out = kernels.tconv2d_forward(xin.data, w.data, stride)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        gx = gw = gb = None
        if xin.requires_grad:
            gx = kernels.tconv2d_backward_input(g, w.data, stride, xin.data.shape)
        if w.requires_grad:
            gw = kernels.tconv2d_backward_kernel(xin.data, g, stride, k)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (xin, w) if b is None else (xin, w, b)
    res = _from_op(out, parents, bwd, "transposed_conv2d")
    return reshape(res, res.data.shape[1:]) if squeeze else res
