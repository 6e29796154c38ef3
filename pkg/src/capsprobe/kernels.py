"""Kernel backend selection.

The compiled extension is used when it imports; ``CAPSPROBE_PURE=1`` forces
the numpy fallback. Both expose ``im2col``, ``col2im``, ``maxpool_forward``,
``maxpool_backward`` and ``route`` over C-contiguous float64 arrays.
"""

import os

from . import _fallback

if os.environ.get("CAPSPROBE_PURE") == "1":
    _impl = _fallback
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _fallback

BACKEND = _impl.BACKEND


def use(name):
    """Switch backend at runtime ('cython' or 'numpy'); returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "numpy":
        _impl = _fallback
    elif name == "cython":
        from . import _kernels

        _impl = _kernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = _impl.BACKEND
    return prev


def available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return ["numpy"]
    return ["cython", "numpy"]


def im2col(x, P, Q, stride):
    return _impl.im2col(x, P, Q, stride)


def col2im(cols, C, H, W, P, Q, stride):
    return _impl.col2im(cols, C, H, W, P, Q, stride)


def maxpool_forward(x, s):
    return _impl.maxpool_forward(x, s)


def maxpool_backward(g, arg, s, H, W):
    return _impl.maxpool_backward(g, arg, s, H, W)


def route(u_hat, iters):
    return _impl.route(u_hat, iters)
