# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback``.

Accumulation order matches the NumPy versions element for element, so both
backends give bitwise-identical results.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int sh, int sw):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // sh + 1
    cdef Py_ssize_t wo = (wp - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((c * kh * kw, n * ho * wo), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t ci, i, j, b, y, x
    cdef real *dst
    cdef real *src
    if n * ho * wo == 0 or c * kh * kw == 0:
        return out
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    dst = &cols[(ci * kh + i) * kw + j, 0]
                    for b in range(n):
                        for y in range(ho):
                            src = &xp[b, ci, y * sh + i, j]
                            for x in range(wo):
                                dst[x] = src[x * sw]
                            dst += wo
    return out


def col2im(real[:, ::1] cols, shape, int kh, int kw, int sh, int sw):
    cdef Py_ssize_t n = shape[0], c = shape[1], hp = shape[2], wp = shape[3]
    cdef Py_ssize_t ho = (hp - kh) // sh + 1
    cdef Py_ssize_t wo = (wp - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    res = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = res
    cdef Py_ssize_t ci, i, j, b, y, x
    cdef real *dst
    cdef real *src
    if n * ho * wo == 0 or c * kh * kw == 0:
        return res
    with nogil:
        # (i, j) outermost so every output element sees adds in the same
        # order as the NumPy slice-add loop
        for i in range(kh):
            for j in range(kw):
                for ci in range(c):
                    src = &cols[(ci * kh + i) * kw + j, 0]
                    for b in range(n):
                        for y in range(ho):
                            dst = &out[b, ci, y * sh + i, j]
                            for x in range(wo):
                                dst[x * sw] += src[x]
                            src += wo
    return res


def bilinear_warp(real[:, :, ::1] img, double[:, ::1] inv, bint fill_nearest, double cval):
    cdef Py_ssize_t c = img.shape[0], h = img.shape[1], w = img.shape[2]
    dtype = np.float32 if real is float else np.float64
    res = np.empty((c, h, w), dtype=dtype)
    cdef real[:, :, ::1] out = res
    cdef Py_ssize_t ch, y, x, x0, y0, x1, y1, cx0, cx1, cy0, cy1
    cdef double sx, sy, fx, fy, w00, w01, w10, w11, v00, v01, v10, v11
    cdef bint ok00, ok01, ok10, ok11
    with nogil:
        for y in range(h):
            for x in range(w):
                sx = inv[0, 0] * x + inv[0, 1] * y + inv[0, 2]
                sy = inv[1, 0] * x + inv[1, 1] * y + inv[1, 2]
                if fill_nearest:
                    sx = min(max(sx, 0.0), w - 1.0)
                    sy = min(max(sy, 0.0), h - 1.0)
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                fx = sx - x0
                fy = sy - y0
                x1 = x0 + 1
                y1 = y0 + 1
                w00 = (1.0 - fx) * (1.0 - fy)
                w01 = fx * (1.0 - fy)
                w10 = (1.0 - fx) * fy
                w11 = fx * fy
                cx0 = min(max(x0, 0), w - 1)
                cx1 = min(max(x1, 0), w - 1)
                cy0 = min(max(y0, 0), h - 1)
                cy1 = min(max(y1, 0), h - 1)
                ok00 = fill_nearest or (0 <= x0 < w and 0 <= y0 < h)
                ok01 = fill_nearest or (0 <= x1 < w and 0 <= y0 < h)
                ok10 = fill_nearest or (0 <= x0 < w and 0 <= y1 < h)
                ok11 = fill_nearest or (0 <= x1 < w and 0 <= y1 < h)
                for ch in range(c):
                    v00 = img[ch, cy0, cx0] if ok00 else cval
                    v01 = img[ch, cy0, cx1] if ok01 else cval
                    v10 = img[ch, cy1, cx0] if ok10 else cval
                    v11 = img[ch, cy1, cx1] if ok11 else cval
                    out[ch, y, x] = <real>(v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11)
    return res
