# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv patch kernels and the fused softplus evaluation."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs

cnp.import_array()


def conv_out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, r, q, row, yy, xx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for r in range(oh):
                            yy = r * stride + i - pad
                            if yy < 0 or yy >= h:
                                continue
                            for q in range(ow):
                                xx = q * stride + j - pad
                                if xx < 0 or xx >= w:
                                    continue
                                ov[b, row, r * ow + q] = xv[b, ch, yy, xx]
    return out


def col2im(cols, shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(n, c * kh * kw, oh * ow)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, r, q, row, yy, xx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for r in range(oh):
                            yy = r * stride + i - pad
                            if yy < 0 or yy >= h:
                                continue
                            for q in range(ow):
                                xx = q * stride + j - pad
                                if xx < 0 or xx >= w:
                                    continue
                                ov[b, ch, yy, xx] += cv[b, row, r * ow + q]
    return out


def softplus_family(z, double beta):
    zc = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[::1] zv = zc.reshape(-1)
    cdef Py_ssize_t m = zv.shape[0], i
    g = np.empty(m, dtype=np.float64)
    d1 = np.empty(m, dtype=np.float64)
    d2 = np.empty(m, dtype=np.float64)
    cdef double[::1] gv = g, d1v = d1, d2v = d2
    cdef double bz, e, s
    with nogil:
        for i in range(m):
            bz = beta * zv[i]
            e = exp(-fabs(bz))
            if bz >= 0:
                gv[i] = (bz + log1p(e)) / beta
                s = 1.0 / (1.0 + e)
            else:
                gv[i] = log1p(e) / beta
                s = e / (1.0 + e)
            d1v[i] = s
            d2v[i] = beta * s * (1.0 - s)
    shp = zc.shape
    return g.reshape(shp), d1.reshape(shp), d2.reshape(shp)
