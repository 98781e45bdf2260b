"""Minimal module system and the transformer building blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled until inside +/- 2 std (ViT-style init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(T.default_dtype())


def parameter(data):
    return Tensor(np.ascontiguousarray(data, dtype=T.default_dtype()), requires_grad=True)


class Module:
    """Base class with attribute-order parameter discovery.

    Attribute insertion order is stable, which fixes checkpoint layout
    and optimizer state alignment.
    """

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters in state dict: {sorted(missing)[:5]} ...")
        for name, arr in state.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            p = params[name]
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: model {p.data.shape} vs state {arr.shape}"
                )
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    def param_count(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        self.weight = parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.heads = heads
        self.scale = (dim // heads) ** -0.5

    def __call__(self, x):
        B, N, D = x.shape
        h = self.heads
        dh = D // h
        qkv = self.qkv(x).reshape((B, N, 3, h, dh)).transpose((2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = T.softmax_lastdim(T.matmul(q, k.transpose((0, 1, 3, 2))) * self.scale)
        out = T.matmul(attn, v).transpose((0, 2, 1, 3)).reshape((B, N, D))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim, heads, mlp_ratio, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, rng, padding=0):
        self.weight = parameter(trunc_normal(rng, (out_ch, in_ch, kernel_size, kernel_size)))
        self.bias = parameter(np.zeros(out_ch))
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class TransposedConv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, stride, rng):
        self.weight = parameter(trunc_normal(rng, (in_ch, out_ch, kernel_size, kernel_size)))
        self.bias = parameter(np.zeros(out_ch))
        self.stride = stride

    def __call__(self, x):
        return T.transposed_conv2d(x, self.weight, self.bias, stride=self.stride)
