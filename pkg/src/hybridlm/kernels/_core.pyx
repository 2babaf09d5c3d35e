# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled single-pass versions of the hot training kernels.

Numerically interchangeable with ``_pure`` (agreement is pinned by the
backend-parity tests); fuses the elementwise/reduction chains that cost
several temporaries each in NumPy.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt

cnp.import_array()

NAME = "compiled"

cdef double INV_SQRT2 = 0.7071067811865475244
cdef double INV_SQRT_2PI = 0.3989422804014326779


def gelu(double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    for i in range(n):
        y[i] = x[i] * 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
    return out


def gelu_grad(double[::1] x, double[::1] dy):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] dx = out
    cdef double cdf, phi
    for i in range(n):
        cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
        phi = exp(-0.5 * x[i] * x[i]) * INV_SQRT_2PI
        dx[i] = (cdf + x[i] * phi) * dy[i]
    return out


def softmax(double[:, ::1] x):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        for j in range(d):
            y[i, j] /= s
    return out


def softmax_grad(double[:, ::1] y, double[:, ::1] dy):
    cdef Py_ssize_t i, j, n = y.shape[0], d = y.shape[1]
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += y[i, j] * dy[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (dy[i, j] - inner)
    return out


def layer_norm(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    out = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, r, c
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mean
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            xhat[i, j] = (x[i, j] - mean) * r
            y[i, j] = gain[j] * xhat[i, j] + bias[j]
    return out, xhat_arr, rstd_arr


def layer_norm_grad(double[:, ::1] dy, double[:, ::1] xhat, double[::1] rstd,
                    double[::1] gain):
    cdef Py_ssize_t i, j, n = dy.shape[0], d = dy.shape[1]
    dx_arr = np.empty((n, d), dtype=np.float64)
    dgain_arr = np.zeros(d, dtype=np.float64)
    dbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef double m1, m2, dxh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dxh = dy[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = rstd[i] * (dy[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return dx_arr, dgain_arr, dbias_arr


def cross_entropy(double[:, ::1] logits, cnp.int64_t[::1] targets):
    cdef Py_ssize_t i, j, n = logits.shape[0], d = logits.shape[1]
    loss_arr = np.empty(n, dtype=np.float64)
    dlogits_arr = np.empty((n, d), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] dl = dlogits_arr
    cdef double m, z
    cdef Py_ssize_t t
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, d):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(d):
            dl[i, j] = exp(logits[i, j] - m)
            z += dl[i, j]
        t = targets[i]
        loss[i] = (m + log(z)) - logits[i, t]
        for j in range(d):
            dl[i, j] /= z
        dl[i, t] -= 1.0
    return loss_arr, dlogits_arr


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                long step, double lr, double beta1, double beta2, double eps,
                double weight_decay):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1**step
    cdef double bc2 = 1.0 - beta2**step
    cdef double upd
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        upd = lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)
        if weight_decay != 0.0:
            upd += lr * weight_decay * p[i]
        p[i] -= upd


def sumsq(double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double s = 0.0
    for i in range(n):
        s += x[i] * x[i]
    return s
