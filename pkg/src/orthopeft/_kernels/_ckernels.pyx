# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; same contracts as ``_pykernels``.

Built with -ffast-math so the float32 transcendental loops vectorize
(libmvec). Inputs are assumed finite; inf/nan propagation is unspecified.
"""
import numpy as np
cimport numpy as cnp

cdef extern from "math.h" nogil:
    float tanhf(float)
    float expf(float)
    float sqrtf(float)
    double tanh(double)
    double exp(double)
    double sqrt(double)

cnp.import_array()

ctypedef fused real:
    float
    double

DEF GELU_C = 0.7978845608028654
DEF GELU_A = 0.044715


def gelu_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0] * x.shape[1], i
    out = np.empty_like(np.asarray(x))
    cdef real[:, ::1] y2 = out
    cdef real* xp = &x[0, 0]
    cdef real* yp = &y2[0, 0]
    cdef real v
    if real is float:
        for i in range(n):
            v = xp[i]
            yp[i] = 0.5 * v * (1.0 + tanhf(<float>GELU_C * (v + <float>GELU_A * v * v * v)))
    else:
        for i in range(n):
            v = xp[i]
            yp[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


def gelu_bwd(real[:, ::1] x, real[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0] * x.shape[1], i
    out = np.empty_like(np.asarray(x))
    cdef real[:, ::1] d2 = out
    cdef real* xp = &x[0, 0]
    cdef real* gp = &g[0, 0]
    cdef real* dp = &d2[0, 0]
    cdef real v, t, dt
    if real is float:
        for i in range(n):
            v = xp[i]
            t = tanhf(<float>GELU_C * (v + <float>GELU_A * v * v * v))
            dt = <float>GELU_C * (1.0 + 3.0 * <float>GELU_A * v * v)
            dp[i] = gp[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt)
    else:
        for i in range(n):
            v = xp[i]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            dt = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            dp[i] = gp[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt)
    return out


def layer_norm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    arr = np.asarray(x)
    y_arr = np.empty_like(arr)
    xhat_arr = np.empty_like(arr)
    rstd_arr = np.empty(n, dtype=arr.dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xh = xhat_arr
    cdef real[::1] rs = rstd_arr
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        r = 1.0 / sqrt(var + eps)
        rs[i] = <real>r
        for j in range(m):
            d = (x[i, j] - mu) * r
            xh[i, j] = <real>d
            y[i, j] = <real>(d * gain[j] + bias[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gain):
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    arr = np.asarray(g)
    dx_arr = np.empty_like(arr)
    dgain_d = np.zeros(m, dtype=np.float64)
    dbias_d = np.zeros(m, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_d
    cdef double[::1] dbias = dbias_d
    cdef double m1, m2, dxh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(m):
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
            dxh = g[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
        m1 /= m
        m2 /= m
        for j in range(m):
            dxh = g[i, j] * gain[j]
            dx[i, j] = <real>(rstd[i] * (dxh - m1 - xhat[i, j] * m2))
    return dx_arr, dgain_d.astype(arr.dtype), dbias_d.astype(arr.dtype)


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty_like(np.asarray(x))
    cdef real[:, ::1] y = out
    cdef real mx, s, inv
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        if real is float:
            for j in range(m):
                y[i, j] = expf(x[i, j] - mx)
                s += y[i, j]
        else:
            for j in range(m):
                y[i, j] = exp(x[i, j] - mx)
                s += y[i, j]
        inv = 1.0 / s
        for j in range(m):
            y[i, j] = y[i, j] * inv
    return out


def softmax_bwd(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty_like(np.asarray(y))
    cdef real[:, ::1] dx = out
    cdef real s
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += g[i, j] * y[i, j]
        for j in range(m):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return out
