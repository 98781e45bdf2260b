"""Hot-kernel dispatch: numba-compiled loops by default, pure numpy on demand.

Set HFMAE_NO_NUMBA=1 (or call set_backend("numpy")) to force the fallback
path; benchmarks/bench_kernels.py compares the two.
"""

import os

from . import numpy_impl

_IMPLS = {"numpy": numpy_impl}
_active = "numpy"

if not os.environ.get("HFMAE_NO_NUMBA"):
    try:
        from . import numba_impl

        _IMPLS["numba"] = numba_impl
        _active = "numba"
    except ImportError:  # pragma: no cover - numba genuinely absent
        pass


def available_backends():
    return tuple(sorted(_IMPLS))


def active_backend():
    return _active


def set_backend(name):
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = name


def conv2d_forward(x, w, padding):
    return _IMPLS[_active].conv2d_forward(x, w, padding)


def conv2d_backward_input(g, w, padding, in_shape):
    return _IMPLS[_active].conv2d_backward_input(g, w, padding, in_shape)


def conv2d_backward_kernel(x, g, padding, k):
    return _IMPLS[_active].conv2d_backward_kernel(x, g, padding, k)


def tconv2d_forward(x, w, stride):
    return _IMPLS[_active].tconv2d_forward(x, w, stride)


def tconv2d_backward_input(g, w, stride, in_shape):
    return _IMPLS[_active].tconv2d_backward_input(g, w, stride, in_shape)


def tconv2d_backward_kernel(x, g, stride, k):
    return _IMPLS[_active].tconv2d_backward_kernel(x, g, stride, k)


def fnv1a64(data):
    return _IMPLS[_active].fnv1a64(data)
