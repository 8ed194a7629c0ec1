# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bilinear gather/scatter kernels.

Layout: value is (G, H, W, C) channel-last, points are (G, P, 2) holding
(x, y) in pixel units with pixel i covering [i, i+1). Neighbours outside
the map contribute zero.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def gather(const double[:, :, :, ::1] value, const double[:, :, ::1] pts):
    cdef Py_ssize_t G = value.shape[0], H = value.shape[1]
    cdef Py_ssize_t W = value.shape[2], C = value.shape[3]
    cdef Py_ssize_t P = pts.shape[1]
    out_arr = np.zeros((G, P, C), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t g, p, c, x0, y0, x1, y1
    cdef double fx, fy, lx, ly, w00, w01, w10, w11
    cdef bint vx0, vx1, vy0, vy1
    with nogil:
        for g in range(G):
            for p in range(P):
                fx = pts[g, p, 0] - 0.5
                fy = pts[g, p, 1] - 0.5
                x0 = <Py_ssize_t>floor(fx)
                y0 = <Py_ssize_t>floor(fy)
                lx = fx - x0
                ly = fy - y0
                x1 = x0 + 1
                y1 = y0 + 1
                vx0 = 0 <= x0 < W
                vx1 = 0 <= x1 < W
                vy0 = 0 <= y0 < H
                vy1 = 0 <= y1 < H
                w00 = (1.0 - ly) * (1.0 - lx)
                w01 = (1.0 - ly) * lx
                w10 = ly * (1.0 - lx)
                w11 = ly * lx
                if vy0 and vx0:
                    for c in range(C):
                        out[g, p, c] += w00 * value[g, y0, x0, c]
                if vy0 and vx1:
                    for c in range(C):
                        out[g, p, c] += w01 * value[g, y0, x1, c]
                if vy1 and vx0:
                    for c in range(C):
                        out[g, p, c] += w10 * value[g, y1, x0, c]
                if vy1 and vx1:
                    for c in range(C):
                        out[g, p, c] += w11 * value[g, y1, x1, c]
    return out_arr


def scatter(const double[:, :, :, ::1] value, const double[:, :, ::1] pts,
            const double[:, :, ::1] gout, bint want_pts):
    cdef Py_ssize_t G = value.shape[0], H = value.shape[1]
    cdef Py_ssize_t W = value.shape[2], C = value.shape[3]
    cdef Py_ssize_t P = pts.shape[1]
    gval_arr = np.zeros((G, H, W, C), dtype=np.float64)
    gpts_arr = np.zeros((G, P, 2), dtype=np.float64)
    cdef double[:, :, :, ::1] gval = gval_arr
    cdef double[:, :, ::1] gpts = gpts_arr
    cdef Py_ssize_t g, p, c, x0, y0, x1, y1
    cdef double fx, fy, lx, ly, w00, w01, w10, w11, go
    cdef double v00, v01, v10, v11, dx, dy
    cdef bint vx0, vx1, vy0, vy1
    with nogil:
        for g in range(G):
            for p in range(P):
                fx = pts[g, p, 0] - 0.5
                fy = pts[g, p, 1] - 0.5
                x0 = <Py_ssize_t>floor(fx)
                y0 = <Py_ssize_t>floor(fy)
                lx = fx - x0
                ly = fy - y0
                x1 = x0 + 1
                y1 = y0 + 1
                vx0 = 0 <= x0 < W
                vx1 = 0 <= x1 < W
                vy0 = 0 <= y0 < H
                vy1 = 0 <= y1 < H
                w00 = (1.0 - ly) * (1.0 - lx)
                w01 = (1.0 - ly) * lx
                w10 = ly * (1.0 - lx)
                w11 = ly * lx
                dx = 0.0
                dy = 0.0
                for c in range(C):
                    go = gout[g, p, c]
                    v00 = 0.0
                    v01 = 0.0
                    v10 = 0.0
                    v11 = 0.0
                    if vy0 and vx0:
                        gval[g, y0, x0, c] += w00 * go
                        v00 = value[g, y0, x0, c]
                    if vy0 and vx1:
                        gval[g, y0, x1, c] += w01 * go
                        v01 = value[g, y0, x1, c]
                    if vy1 and vx0:
                        gval[g, y1, x0, c] += w10 * go
                        v10 = value[g, y1, x0, c]
                    if vy1 and vx1:
                        gval[g, y1, x1, c] += w11 * go
                        v11 = value[g, y1, x1, c]
                    if want_pts:
                        dx += go * ((1.0 - ly) * (v01 - v00) + ly * (v11 - v10))
                        dy += go * ((1.0 - lx) * (v10 - v00) + lx * (v11 - v01))
                if want_pts:
                    gpts[g, p, 0] = dx
                    gpts[g, p, 1] = dy
    return gval_arr, gpts_arr
