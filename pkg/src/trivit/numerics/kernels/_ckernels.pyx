# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the numpy kernels in ``pykernels``.

Each routine fuses what numpy does in several passes (max-subtraction
softmax, layernorm statistics, the GELU erf pair, in-plane resampling)
into one cache-friendly loop. Signatures and semantics match pykernels
exactly; outputs agree to floating-point roundoff.
"""

import numpy as np

cimport cython
from libc.math cimport cos, erf, erff, exp, expf, floor, sin, sqrt

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865475
cdef double INV_SQRT_2PI = 0.3989422804014327

cdef inline real _exp(real v) noexcept nogil:
    if real is float:
        return expf(v)
    else:
        return exp(v)

cdef inline real _erf(real v) noexcept nogil:
    if real is float:
        return erff(v)
    else:
        return erf(v)


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef real m, v
    cdef double s
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(cols):
                v = _exp(x[i, j] - m)
                out[i, j] = v
                s += v
            for j in range(cols):
                out[i, j] = <real> (out[i, j] / s)
    return out_arr


def softmax_backward(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double inner
    with nogil:
        for i in range(rows):
            inner = 0.0
            for j in range(cols):
                inner += <double> gy[i, j] * <double> y[i, j]
            for j in range(cols):
                out[i, j] = <real> (<double> y[i, j] * (<double> gy[i, j] - inner))
    return out_arr


def layer_norm_forward(real[:, ::1] x, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    dtype = np.asarray(x).dtype
    xhat_arr = np.empty((rows, cols), dtype=dtype)
    rstd_arr = np.empty((rows, 1), dtype=dtype)
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[:, ::1] rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double mean, var, d, r
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(cols):
                mean += <double> x[i, j]
            mean /= cols
            var = 0.0
            for j in range(cols):
                d = <double> x[i, j] - mean
                var += d * d
            var /= cols
            r = 1.0 / sqrt(var + eps)
            rstd[i, 0] = <real> r
            for j in range(cols):
                xhat[i, j] = <real> ((<double> x[i, j] - mean) * r)
    return xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] xhat, real[:, ::1] rstd, real[::1] gain,
                        real[:, ::1] gy):
    cdef Py_ssize_t rows = xhat.shape[0], cols = xhat.shape[1]
    dtype = np.asarray(xhat).dtype
    gx_arr = np.empty((rows, cols), dtype=dtype)
    ggain_arr = np.zeros(cols, dtype=dtype)
    gbias_arr = np.zeros(cols, dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef real[::1] ggain = ggain_arr
    cdef real[::1] gbias = gbias_arr
    cdef Py_ssize_t i, j
    cdef double m1, m2, gh
    with nogil:
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                gh = <double> gy[i, j] * <double> gain[j]
                m1 += gh
                m2 += gh * <double> xhat[i, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                gh = <double> gy[i, j] * <double> gain[j]
                gx[i, j] = <real> (<double> rstd[i, 0]
                                   * (gh - m1 - <double> xhat[i, j] * m2))
                ggain[j] += <real> (<double> gy[i, j] * <double> xhat[i, j])
                gbias[j] += gy[i, j]
    return gx_arr, ggain_arr, gbias_arr


def gelu_forward(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef real v
    with nogil:
        for i in range(rows):
            for j in range(cols):
                v = x[i, j]
                out[i, j] = <real> (0.5 * v * (1.0 + _erf(<real> (v * INV_SQRT2))))
    return out_arr


def gelu_backward(real[:, ::1] x, real[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef real v
    cdef double cdf, pdf
    with nogil:
        for i in range(rows):
            for j in range(cols):
                v = x[i, j]
                cdf = 0.5 * (1.0 + _erf(<real> (v * INV_SQRT2)))
                pdf = INV_SQRT_2PI * _exp(<real> (-0.5 * v * v))
                out[i, j] = <real> (<double> gy[i, j] * (cdf + v * pdf))
    return out_arr


def rotate_plane(real[:, :, ::1] vol, int axis, double angle_rad):
    """In-plane rotation about one grid axis, bilinear, zero fill."""
    cdef Py_ssize_t d0 = vol.shape[0], d1 = vol.shape[1], d2 = vol.shape[2]
    dtype = np.asarray(vol).dtype
    out_arr = np.zeros((d0, d1, d2), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t nk, na, nb, k, ia, ib, a0, b0
    cdef double ca, cb, cos_t, sin_t, sa, sb, fa, fb, acc, w
    cdef Py_ssize_t doa, dob, aa, bb

    if axis == 0:
        nk, na, nb = d0, d1, d2
    elif axis == 1:
        nk, na, nb = d1, d0, d2
    else:
        nk, na, nb = d2, d0, d1
    ca = (na - 1) / 2.0
    cb = (nb - 1) / 2.0
    cos_t = cos(angle_rad)
    sin_t = sin(angle_rad)

    with nogil:
        for ia in range(na):
            for ib in range(nb):
                sa = cos_t * (ia - ca) + sin_t * (ib - cb) + ca
                sb = -sin_t * (ia - ca) + cos_t * (ib - cb) + cb
                a0 = <Py_ssize_t> floor(sa)
                b0 = <Py_ssize_t> floor(sb)
                fa = sa - a0
                fb = sb - b0
                for k in range(nk):
                    acc = 0.0
                    for doa in range(2):
                        for dob in range(2):
                            aa = a0 + doa
                            bb = b0 + dob
                            if 0 <= aa < na and 0 <= bb < nb:
                                w = (fa if doa else 1.0 - fa) * (fb if dob else 1.0 - fb)
                                if axis == 0:
                                    acc += w * <double> vol[k, aa, bb]
                                elif axis == 1:
                                    acc += w * <double> vol[aa, k, bb]
                                else:
                                    acc += w * <double> vol[aa, bb, k]
                    if axis == 0:
                        out[k, ia, ib] = <real> acc
                    elif axis == 1:
                        out[ia, k, ib] = <real> acc
                    else:
                        out[ia, ib, k] = <real> acc
    return out_arr
