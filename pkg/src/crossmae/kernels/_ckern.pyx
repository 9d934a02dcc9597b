# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the fallback kernels. Same signatures, same results
(within floating-point reassociation tolerance; the parity tests pin 1e-12).
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

cnp.import_array()

cdef double INV_SQRT2 = 1.0 / sqrt(2.0)
cdef double INV_SQRT_2PI = 1.0 / sqrt(2.0 * 3.14159265358979323846)


def gelu_fwd(cnp.ndarray x):
    shape = (<object> x).shape
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v
    for i in range(n):
        v = xf[i]
        out[i] = 0.5 * v * (1.0 + erf(v * INV_SQRT2))
    return out.reshape(shape)


def gelu_bwd(cnp.ndarray x, cnp.ndarray gy):
    shape = (<object> x).shape
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gf = np.ascontiguousarray(gy, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = xf[i]
        cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
        pdf = exp(-0.5 * v * v) * INV_SQRT_2PI
        out[i] = gf[i] * (cdf + v * pdf)
    return out.reshape(shape)


def softmax_fwd(cnp.ndarray x):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xf = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty_like(xf)
    cdef Py_ssize_t i, j, r = xf.shape[0], c = xf.shape[1]
    cdef double mx, s
    for i in range(r):
        mx = xf[i, 0]
        for j in range(1, c):
            if xf[i, j] > mx:
                mx = xf[i, j]
        s = 0.0
        for j in range(c):
            out[i, j] = exp(xf[i, j] - mx)
            s += out[i, j]
        for j in range(c):
            out[i, j] /= s
    return out


def softmax_bwd(cnp.ndarray y, cnp.ndarray gy):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] yf = np.ascontiguousarray(y, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gf = np.ascontiguousarray(gy, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty_like(yf)
    cdef Py_ssize_t i, j, r = yf.shape[0], c = yf.shape[1]
    cdef double dot
    for i in range(r):
        dot = 0.0
        for j in range(c):
            dot += gf[i, j] * yf[i, j]
        for j in range(c):
            out[i, j] = yf[i, j] * (gf[i, j] - dot)
    return out


def layernorm_fwd(cnp.ndarray x, cnp.ndarray gain, cnp.ndarray bias, double eps):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xf = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.ascontiguousarray(gain, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] b = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t i, j, r = xf.shape[0], c = xf.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.empty_like(xf)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xhat = np.empty_like(xf)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] inv_std = np.empty(r, dtype=np.float64)
    cdef double mu, var, d, isd
    for i in range(r):
        mu = 0.0
        for j in range(c):
            mu += xf[i, j]
        mu /= c
        var = 0.0
        for j in range(c):
            d = xf[i, j] - mu
            var += d * d
        var /= c
        isd = 1.0 / sqrt(var + eps)
        inv_std[i] = isd
        for j in range(c):
            xhat[i, j] = (xf[i, j] - mu) * isd
            y[i, j] = xhat[i, j] * g[j] + b[j]
    return y, xhat, inv_std


def layernorm_bwd(cnp.ndarray xhat, cnp.ndarray inv_std, cnp.ndarray gain, cnp.ndarray gy):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xh = np.ascontiguousarray(xhat, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] isd = np.ascontiguousarray(inv_std, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.ascontiguousarray(gain, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gf = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t i, j, r = xh.shape[0], c = xh.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gx = np.empty_like(xh)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ggain = np.zeros(c, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gbias = np.zeros(c, dtype=np.float64)
    cdef double m1, m2, gxh
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            gxh = gf[i, j] * g[j]
            m1 += gxh
            m2 += gxh * xh[i, j]
        m1 /= c
        m2 /= c
        for j in range(c):
            gxh = gf[i, j] * g[j]
            gx[i, j] = (gxh - m1 - xh[i, j] * m2) * isd[i]
            ggain[j] += gf[i, j] * xh[i, j]
            gbias[j] += gf[i, j]
    return gx, ggain, gbias


def adamw_update(cnp.ndarray param, cnp.ndarray grad, cnp.ndarray m, cnp.ndarray v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, double bias_c1, double bias_c2):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] p = param
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gr = grad
    cdef cnp.ndarray[cnp.float64_t, ndim=1] mf = m
    cdef cnp.ndarray[cnp.float64_t, ndim=1] vf = v
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double mhat, vhat
    for i in range(n):
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * gr[i]
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * gr[i] * gr[i]
        mhat = mf[i] / bias_c1
        vhat = vf[i] / bias_c2
        p[i] -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p[i])
