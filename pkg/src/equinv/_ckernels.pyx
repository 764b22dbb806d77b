# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, log

cnp.import_array()


def bilinear_sample(src, coords):
    cdef double[:, :, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1], nc = s.shape[2]
    cdef Py_ssize_t n = c.shape[0]
    out_arr = np.empty((n, nc), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, x0, y0, x1, y1
    cdef double x, y, fx, fy, top, bot
    cdef double xmax = w - 1.0, ymax = h - 1.0
    with nogil:
        for i in range(n):
            x = c[i, 0]
            y = c[i, 1]
            if x < 0.0:
                x = 0.0
            elif x > xmax:
                x = xmax
            if y < 0.0:
                y = 0.0
            elif y > ymax:
                y = ymax
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fx = x - x0
            fy = y - y0
            for k in range(nc):
                top = s[y0, x0, k] * (1.0 - fx) + s[y0, x1, k] * fx
                bot = s[y1, x0, k] * (1.0 - fx) + s[y1, x1, k] * fx
                out[i, k] = top * (1.0 - fy) + bot * fy
    return out_arr


def tps_eval(points, ctrl, weights, affine):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] cp = np.ascontiguousarray(ctrl, dtype=np.float64)
    cdef double[:, ::1] wt = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, ::1] af = np.ascontiguousarray(affine, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], m = cp.shape[0]
    val_arr = np.empty((n, 2), dtype=np.float64)
    jac_arr = np.empty((n, 2, 2), dtype=np.float64)
    cdef double[:, ::1] val = val_arr
    cdef double[:, :, ::1] jac = jac_arr
    cdef Py_ssize_t i, j
    cdef double px, py, dx, dy, r2, lr, u, du
    cdef double v0, v1, j00, j01, j10, j11
    with nogil:
        for i in range(n):
            px = p[i, 0]
            py = p[i, 1]
            v0 = af[0, 0] + px * af[1, 0] + py * af[2, 0]
            v1 = af[0, 1] + px * af[1, 1] + py * af[2, 1]
            j00 = af[1, 0]
            j01 = af[2, 0]
            j10 = af[1, 1]
            j11 = af[2, 1]
            for j in range(m):
                dx = px - cp[j, 0]
                dy = py - cp[j, 1]
                r2 = dx * dx + dy * dy
                if r2 > 0.0:
                    lr = log(r2)
                    u = 0.5 * r2 * lr
                    du = lr + 1.0
                    v0 = v0 + u * wt[j, 0]
                    v1 = v1 + u * wt[j, 1]
                    j00 = j00 + du * dx * wt[j, 0]
                    j01 = j01 + du * dy * wt[j, 0]
                    j10 = j10 + du * dx * wt[j, 1]
                    j11 = j11 + du * dy * wt[j, 1]
            val[i, 0] = v0
            val[i, 1] = v1
            jac[i, 0, 0] = j00
            jac[i, 0, 1] = j01
            jac[i, 1, 0] = j10
            jac[i, 1, 1] = j11
    return val_arr, jac_arr
