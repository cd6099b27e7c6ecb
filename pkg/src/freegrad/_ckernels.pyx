# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Signatures mirror freegrad._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w):
    """Valid cross-correlation: out[b,o,i,j] = sum_{c,k,l} w[o,c,k,l] x[b,c,i+k,j+l]."""
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t no = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = wd - kw + 1
    out_arr = np.zeros((nb, no, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, i, j, k, l
    cdef double wv
    for b in range(nb):
        for o in range(no):
            for c in range(nc):
                for k in range(kh):
                    for l in range(kw):
                        wv = w[o, c, k, l]
                        for i in range(oh):
                            for j in range(ow):
                                out[b, o, i, j] += wv * x[b, c, i + k, j + l]
    return out_arr


def conv2d_backward_input(const double[:, :, :, ::1] g, const double[:, :, :, ::1] w,
                          Py_ssize_t h, Py_ssize_t wd):
    """Adjoint of conv2d_forward with respect to its input (full correlation, flipped kernel)."""
    cdef Py_ssize_t nb = g.shape[0], no = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t nc = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    dx_arr = np.zeros((nb, nc, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, o, c, i, j, k, l
    cdef double wv
    for b in range(nb):
        for o in range(no):
            for c in range(nc):
                for k in range(kh):
                    for l in range(kw):
                        wv = w[o, c, k, l]
                        for i in range(oh):
                            for j in range(ow):
                                dx[b, c, i + k, j + l] += wv * g[b, o, i, j]
    return dx_arr


def conv2d_backward_weight(const double[:, :, :, ::1] x, const double[:, :, :, ::1] g,
                           Py_ssize_t kh, Py_ssize_t kw):
    """Gradient of sum(g * conv2d_forward(x, w)) with respect to w."""
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1]
    cdef Py_ssize_t no = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    dw_arr = np.zeros((no, nc, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t b, o, c, i, j, k, l
    cdef double acc
    for o in range(no):
        for c in range(nc):
            for k in range(kh):
                for l in range(kw):
                    acc = 0.0
                    for b in range(nb):
                        for i in range(oh):
                            for j in range(ow):
                                acc += g[b, o, i, j] * x[b, c, i + k, j + l]
                    dw[o, c, k, l] = acc
    return dw_arr


def maxpool2d_forward(const double[:, :, :, ::1] x, Py_ssize_t p):
    """Non-overlapping p x p max pooling. Returns (pooled, flat argmax index per window)."""
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t oh = h // p, ow = wd // p
    out_arr = np.empty((nb, nc, oh, ow), dtype=np.float64)
    arg_arr = np.empty((nb, nc, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, i, j, k, l, best_idx
    cdef double best, v
    for b in range(nb):
        for c in range(nc):
            for i in range(oh):
                for j in range(ow):
                    best = -INFINITY
                    best_idx = 0
                    for k in range(p):
                        for l in range(p):
                            v = x[b, c, i * p + k, j * p + l]
                            if v > best:
                                best = v
                                best_idx = (i * p + k) * wd + (j * p + l)
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = best_idx
    return out_arr, arg_arr


def maxpool2d_backward(const double[:, :, :, ::1] g, const long long[:, :, :, ::1] arg,
                       Py_ssize_t h, Py_ssize_t wd):
    cdef Py_ssize_t nb = g.shape[0], nc = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    dx_arr = np.zeros((nb, nc, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, i, j, idx
    for b in range(nb):
        for c in range(nc):
            for i in range(oh):
                for j in range(ow):
                    idx = arg[b, c, i, j]
                    dx[b, c, idx // wd, idx % wd] += g[b, c, i, j]
    return dx_arr


cdef void _matvec(const double[:, ::1] m, const double* v, double* out) nogil:
    cdef Py_ssize_t i, j
    for i in range(m.shape[0]):
        out[i] = 0.0
        for j in range(m.shape[1]):
            out[i] += m[i, j] * v[j]


cdef void _matTvec(const double[:, ::1] m, const double* v, double* out) nogil:
    cdef Py_ssize_t i, j
    for j in range(m.shape[1]):
        out[j] = 0.0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            out[j] += m[i, j] * v[i]


def grad_filter_run(const double[:, ::1] A, const double[:, ::1] B, const double[:, ::1] C,
                    const double[:, :, ::1] prec_x, const double[:, ::1] prec_z,
                    const double[:, ::1] ys, const double[:, ::1] us,
                    const double[::1] mu0, Py_ssize_t inner_steps, const double[::1] rates):
    """Run the gradient filter over a whole observation sequence.

    At every step the mean starts at the dynamics prediction and takes
    ``inner_steps`` descent steps on the precision-weighted MAP objective.
    ``prec_x[t]`` and ``rates[t]`` are the state precision and step size used
    at step ``t``. Returns the (T, n) array of filtered means.
    """
    cdef Py_ssize_t T = ys.shape[0], n = A.shape[0], m = C.shape[0], nu = B.shape[1]
    out_arr = np.empty((T, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    prev_arr = np.array(mu0, dtype=np.float64)
    cdef double[::1] prev = prev_arr
    cdef double[::1] pred = np.empty(n)
    cdef double[::1] mu = np.empty(n)
    cdef double[::1] tmp_n = np.empty(n)
    cdef double[::1] ex = np.empty(n)
    cdef double[::1] pex = np.empty(n)
    cdef double[::1] cm = np.empty(m)
    cdef double[::1] ez = np.empty(m)
    cdef double[::1] pez = np.empty(m)
    cdef double[::1] back = np.empty(n)
    cdef Py_ssize_t t, s, i, j
    for t in range(T):
        _matvec(A, &prev[0], &pred[0])
        for i in range(n):
            for j in range(nu):
                pred[i] += B[i, j] * us[t, j]
            mu[i] = pred[i]
        for s in range(inner_steps):
            _matvec(C, &mu[0], &cm[0])
            for i in range(m):
                ez[i] = ys[t, i] - cm[i]
            _matvec(prec_z, &ez[0], &pez[0])
            _matTvec(C, &pez[0], &back[0])
            for i in range(n):
                ex[i] = mu[i] - pred[i]
            _matvec(prec_x[t], &ex[0], &pex[0])
            for i in range(n):
                mu[i] += rates[t] * (back[i] - pex[i])
        for i in range(n):
            out[t, i] = mu[i]
            prev[i] = mu[i]
    return out_arr
