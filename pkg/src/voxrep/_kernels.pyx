# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct 3D convolution kernels (forward and both backward passes).

Threads own disjoint output slices and every element accumulates its terms
in the same fixed (channel, kx, ky, kz) sequence, so results are bitwise
reproducible for any thread count. The z axis is innermost and contiguous;
the inner loops live in _conv_inner.h where restrict pointers let the
compiler vectorize them.

All entry points expect zero-initialized output buffers and pre-padded
inputs; callers go through ``voxrep.functional`` rather than using these
directly.
"""

import numpy as np

from cython.parallel cimport parallel, prange
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset

cdef extern from "_conv_inner.h":
    void vx_axpy_f32(float* dst, const float* src, float a, long n, long sstride) nogil
    void vx_axpy_f64(double* dst, const double* src, double a, long n, long sstride) nogil
    void vx_axpy_scatter_f32(float* dst, long dstride, const float* src, float a, long n) nogil
    void vx_axpy_scatter_f64(double* dst, long dstride, const double* src, double a, long n) nogil
    void vx_row3_f32(float* dst, const float* src, const float* w3, long n) nogil
    void vx_row3_f64(double* dst, const double* src, const double* w3, long n) nogil
    void vx_row3x3_f32(float* dst, const float* r0, const float* r1, const float* r2,
                       const float* w9, long n) nogil
    void vx_row3x3_f64(double* dst, const double* r0, const double* r1, const double* r2,
                       const double* w9, long n) nogil
    void vx_dot3_f32(const float* g, const float* x, long n, float* acc3) nogil
    void vx_dot3_f64(const double* g, const double* x, long n, double* acc3) nogil
    void vx_dot3x3_f32(const float* g, const float* x0, const float* x1, const float* x2,
                       long n, float* acc9) nogil
    void vx_dot3x3_f64(const double* g, const double* x0, const double* x1, const double* x2,
                       long n, double* acc9) nogil
    float vx_dot_f32(const float* a, const float* b, long n, long bstride) nogil
    double vx_dot_f64(const double* a, const double* b, long n, long bstride) nogil

ctypedef fused floating:
    float
    double


def conv3d_forward(floating[:, :, :, :, ::1] xp,
                   floating[:, :, :, :, ::1] w,
                   Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz,
                   floating[:, :, :, :, ::1] out):
    """out[b,o,x,y,z] = sum_{i,kx,ky,kz} xp[b,i,x*sx+kx,y*sy+ky,z*sz+kz] * w[o,i,k...]."""
    cdef Py_ssize_t B = xp.shape[0], Ci = xp.shape[1]
    cdef Py_ssize_t Co = w.shape[0]
    cdef Py_ssize_t KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t XO = out.shape[2], YO = out.shape[3], ZO = out.shape[4]
    cdef Py_ssize_t total = B * Co * XO
    cdef bint fast33 = KY == 3 and KZ == 3 and sy == 1 and sz == 1
    cdef bint fast3 = KZ == 3 and sz == 1
    cdef Py_ssize_t idx, rem, b, co, ci, kx, ky, kz, x, y
    cdef floating* tile
    cdef const floating* src
    cdef const floating* wrow

    with nogil, parallel():
        tile = <floating*> malloc(YO * ZO * sizeof(floating))
        for idx in prange(total, schedule="static"):
            b = idx // (Co * XO)
            rem = idx % (Co * XO)
            co = rem // XO
            x = rem % XO
            memset(tile, 0, YO * ZO * sizeof(floating))
            for ci in range(Ci):
                for kx in range(KX):
                    if fast33:
                        wrow = &w[co, ci, kx, 0, 0]
                        for y in range(YO):
                            if floating is float:
                                vx_row3x3_f32(tile + y * ZO,
                                              &xp[b, ci, x * sx + kx, y, 0],
                                              &xp[b, ci, x * sx + kx, y + 1, 0],
                                              &xp[b, ci, x * sx + kx, y + 2, 0],
                                              wrow, ZO)
                            else:
                                vx_row3x3_f64(tile + y * ZO,
                                              &xp[b, ci, x * sx + kx, y, 0],
                                              &xp[b, ci, x * sx + kx, y + 1, 0],
                                              &xp[b, ci, x * sx + kx, y + 2, 0],
                                              wrow, ZO)
                        continue
                    for ky in range(KY):
                        for y in range(YO):
                            src = &xp[b, ci, x * sx + kx, y * sy + ky, 0]
                            wrow = &w[co, ci, kx, ky, 0]
                            if fast3:
                                if floating is float:
                                    vx_row3_f32(tile + y * ZO, src, wrow, ZO)
                                else:
                                    vx_row3_f64(tile + y * ZO, src, wrow, ZO)
                            else:
                                for kz in range(KZ):
                                    if floating is float:
                                        vx_axpy_f32(tile + y * ZO, src + kz, wrow[kz], ZO, sz)
                                    else:
                                        vx_axpy_f64(tile + y * ZO, src + kz, wrow[kz], ZO, sz)
            memcpy(&out[b, co, x, 0, 0], tile, YO * ZO * sizeof(floating))
        free(tile)
    return out


def conv3d_backward_input(floating[:, :, :, :, ::1] g,
                          floating[:, :, :, :, ::1] w,
                          Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz,
                          floating[:, :, :, :, ::1] gxp):
    """Scatter output gradients back onto the padded input; gxp owned per (b, ci).

    Callers use this for strided convolutions only; the unit-stride case is
    rewritten as a forward pass over flipped weights (see functional.conv3d).
    """
    cdef Py_ssize_t B = g.shape[0], Co = g.shape[1]
    cdef Py_ssize_t Ci = w.shape[1]
    cdef Py_ssize_t KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t XO = g.shape[2], YO = g.shape[3], ZO = g.shape[4]
    cdef Py_ssize_t idx, b, co, ci, kx, ky, kz, x, y
    cdef floating wv
    cdef const floating* grow
    cdef floating* dst

    with nogil:
        for idx in prange(B * Ci, schedule="static"):
            b = idx // Ci
            ci = idx % Ci
            for co in range(Co):
                for x in range(XO):
                    for kx in range(KX):
                        for y in range(YO):
                            grow = &g[b, co, x, y, 0]
                            for ky in range(KY):
                                for kz in range(KZ):
                                    wv = w[co, ci, kx, ky, kz]
                                    dst = &gxp[b, ci, x * sx + kx, y * sy + ky, kz]
                                    if floating is float:
                                        vx_axpy_scatter_f32(dst, sz, grow, wv, ZO)
                                    else:
                                        vx_axpy_scatter_f64(dst, sz, grow, wv, ZO)
    return gxp


def conv3d_backward_weight(floating[:, :, :, :, ::1] g,
                           floating[:, :, :, :, ::1] xp,
                           Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz,
                           floating[:, :, :, :, ::1] gw):
    """gw[o,i,k...] = sum_{b,x,y,z} g[b,o,x,y,z] * xp[b,i,x*sx+kx,...]; gw owned per (o, i)."""
    cdef Py_ssize_t B = g.shape[0], Co = g.shape[1]
    cdef Py_ssize_t Ci = xp.shape[1]
    cdef Py_ssize_t KX = gw.shape[2], KY = gw.shape[3], KZ = gw.shape[4]
    cdef Py_ssize_t XO = g.shape[2], YO = g.shape[3], ZO = g.shape[4]
    cdef Py_ssize_t nk = KX * KY * KZ
    cdef bint fast33 = KY == 3 and KZ == 3 and sy == 1 and sz == 1
    cdef bint fast3 = KZ == 3 and sz == 1
    cdef Py_ssize_t idx, co, ci, kx, ky, kz, b, x, y
    cdef floating* kacc
    cdef const floating* grow
    cdef const floating* xrow

    with nogil, parallel():
        kacc = <floating*> malloc(nk * sizeof(floating))
        for idx in prange(Co * Ci, schedule="static"):
            co = idx // Ci
            ci = idx % Ci
            memset(kacc, 0, nk * sizeof(floating))
            for b in range(B):
                for x in range(XO):
                    for kx in range(KX):
                        if fast33:
                            for y in range(YO):
                                if floating is float:
                                    vx_dot3x3_f32(&g[b, co, x, y, 0],
                                                  &xp[b, ci, x * sx + kx, y, 0],
                                                  &xp[b, ci, x * sx + kx, y + 1, 0],
                                                  &xp[b, ci, x * sx + kx, y + 2, 0],
                                                  ZO, kacc + kx * 9)
                                else:
                                    vx_dot3x3_f64(&g[b, co, x, y, 0],
                                                  &xp[b, ci, x * sx + kx, y, 0],
                                                  &xp[b, ci, x * sx + kx, y + 1, 0],
                                                  &xp[b, ci, x * sx + kx, y + 2, 0],
                                                  ZO, kacc + kx * 9)
                            continue
                        for y in range(YO):
                            grow = &g[b, co, x, y, 0]
                            for ky in range(KY):
                                xrow = &xp[b, ci, x * sx + kx, y * sy + ky, 0]
                                if fast3:
                                    if floating is float:
                                        vx_dot3_f32(grow, xrow, ZO, kacc + (kx * KY + ky) * 3)
                                    else:
                                        vx_dot3_f64(grow, xrow, ZO, kacc + (kx * KY + ky) * 3)
                                else:
                                    for kz in range(KZ):
                                        if floating is float:
                                            kacc[(kx * KY + ky) * KZ + kz] += vx_dot_f32(grow, xrow + kz, ZO, sz)
                                        else:
                                            kacc[(kx * KY + ky) * KZ + kz] += vx_dot_f64(grow, xrow + kz, ZO, sz)
            for kx in range(KX):
                for ky in range(KY):
                    for kz in range(KZ):
                        gw[co, ci, kx, ky, kz] = kacc[(kx * KY + ky) * KZ + kz]
        free(kacc)
    return gw
