"""Pure-numpy implementations of the compiled kernels in ``_ckernels.pyx``.

Every function here has the same signature and semantics as its compiled
counterpart; ``freegrad.kernels`` picks one set at import time.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # b, c, oh, ow, kh, kw
    return np.einsum("bcijkl,ockl->boij", win, w, optimize=True)


def conv2d_backward_input(g: np.ndarray, w: np.ndarray, h: int, wd: int) -> np.ndarray:
    kh, kw = w.shape[2], w.shape[3]
    padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = w[:, :, ::-1, ::-1]
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # b, o, h, wd, kh, kw
    out = np.einsum("boijkl,ockl->bcij", win, flipped, optimize=True)
    return np.ascontiguousarray(out[:, :, :h, :wd])


def conv2d_backward_weight(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # b, c, oh, ow, kh, kw
    return np.einsum("bcijkl,boij->ockl", win, g, optimize=True)


def maxpool2d_forward(x: np.ndarray, p: int):
    nb, nc, h, wd = x.shape
    oh, ow = h // p, wd // p
    blocks = x[:, :, : oh * p, : ow * p].reshape(nb, nc, oh, p, ow, p).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(nb, nc, oh, ow, p * p)
    local = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * p + local // p
    cols = np.arange(ow)[None, :] * p + local % p
    return np.ascontiguousarray(out), (rows * wd + cols).astype(np.int64)


def maxpool2d_backward(g: np.ndarray, arg: np.ndarray, h: int, wd: int) -> np.ndarray:
    nb, nc = g.shape[:2]
    dx = np.zeros((nb, nc, h * wd))
    flat_idx = arg.reshape(nb, nc, -1)
    np.add.at(dx, (np.arange(nb)[:, None, None], np.arange(nc)[None, :, None], flat_idx),
              g.reshape(nb, nc, -1))
    return dx.reshape(nb, nc, h, wd)


def grad_filter_run(A, B, C, prec_x, prec_z, ys, us, mu0, inner_steps, rates):
    T, n = ys.shape[0], A.shape[0]
    out = np.empty((T, n))
    prev = np.array(mu0, dtype=np.float64)
    for t in range(T):
        pred = A @ prev + B @ us[t]
        mu = pred.copy()
        for _ in range(inner_steps):
            ez = ys[t] - C @ mu
            mu = mu + rates[t] * (C.T @ (prec_z @ ez) - prec_x[t] @ (mu - pred))
        out[t] = mu
        prev = mu
    return out
