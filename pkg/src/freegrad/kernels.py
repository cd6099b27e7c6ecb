"""Kernel dispatch: compiled Cython core when available, numpy fallback otherwise.

Set ``FREEGRAD_PURE_PYTHON=1`` before import to force the fallback. ``BACKEND``
reports which implementation is active. Both implementations stay importable
as ``compiled`` (possibly ``None``) and ``fallback`` for tests and benchmarks.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels as fallback

try:  # pragma: no cover - depends on whether the extension was built
    from . import _ckernels as compiled
except ImportError:  # pragma: no cover
    compiled = None

_use_compiled = compiled is not None and os.environ.get("FREEGRAD_PURE_PYTHON", "") not in ("1", "true", "yes")
_impl = compiled if _use_compiled else fallback
BACKEND = "cython" if _use_compiled else "numpy"


def _c4(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w):
    return _impl.conv2d_forward(_c4(x), _c4(w))


def conv2d_backward_input(g, w, h, wd):
    return _impl.conv2d_backward_input(_c4(g), _c4(w), int(h), int(wd))


def conv2d_backward_weight(x, g, kh, kw):
    return _impl.conv2d_backward_weight(_c4(x), _c4(g), int(kh), int(kw))


def maxpool2d_forward(x, p):
    return _impl.maxpool2d_forward(_c4(x), int(p))


def maxpool2d_backward(g, arg, h, wd):
    return _impl.maxpool2d_backward(_c4(g), np.ascontiguousarray(arg, dtype=np.int64), int(h), int(wd))


def grad_filter_run(A, B, C, prec_x, prec_z, ys, us, mu0, inner_steps, rates):
    """``prec_x`` may be one (n, n) matrix or a (T, n, n) stack; ``rates`` a scalar or (T,)."""
    T, n = len(ys), len(A)
    prec_x = np.broadcast_to(np.asarray(prec_x, dtype=np.float64), (T, n, n))
    rates = np.broadcast_to(np.asarray(rates, dtype=np.float64), (T,))
    return _impl.grad_filter_run(_c4(A), _c4(B), _c4(C), _c4(prec_x), _c4(prec_z), _c4(ys), _c4(us),
                                 _c4(mu0), int(inner_steps), _c4(rates))
