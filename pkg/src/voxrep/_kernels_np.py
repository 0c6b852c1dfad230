"""Pure numpy fallback for the compiled convolution kernels.

Same contracts as ``_kernels``: direct convolution realized as one batched
matmul per kernel offset, accumulated in a fixed (kx, ky, kz) order so
results are reproducible run to run. Used when the compiled extension is
unavailable or explicitly disabled.
"""

import numpy as np


def _offset_view(xp, kx, ky, kz, sx, sy, sz, xo, yo, zo):
    return xp[:, :, kx:kx + sx * xo:sx, ky:ky + sy * yo:sy, kz:kz + sz * zo:sz]


def conv3d_forward(xp, w, sx, sy, sz, out):
    b, ci = xp.shape[:2]
    co, _, kxs, kys, kzs = w.shape
    xo, yo, zo = out.shape[2:]
    m = xo * yo * zo
    out_flat = out.reshape(b, co, m)
    for kx in range(kxs):
        for ky in range(kys):
            for kz in range(kzs):
                sl = _offset_view(xp, kx, ky, kz, sx, sy, sz, xo, yo, zo)
                sl = np.ascontiguousarray(sl).reshape(b, ci, m)
                out_flat += np.matmul(w[:, :, kx, ky, kz][None], sl)
    return out


def conv3d_backward_input(g, w, sx, sy, sz, gxp):
    b, co = g.shape[:2]
    _, ci, kxs, kys, kzs = w.shape
    xo, yo, zo = g.shape[2:]
    g_flat = g.reshape(b, co, xo * yo * zo)
    for kx in range(kxs):
        for ky in range(kys):
            for kz in range(kzs):
                contrib = np.matmul(w[:, :, kx, ky, kz].T[None], g_flat)
                target = _offset_view(gxp, kx, ky, kz, sx, sy, sz, xo, yo, zo)
                target += contrib.reshape(b, ci, xo, yo, zo)
    return gxp


def conv3d_backward_weight(g, xp, sx, sy, sz, gw):
    b, co = g.shape[:2]
    ci = xp.shape[1]
    _, _, kxs, kys, kzs = gw.shape
    xo, yo, zo = g.shape[2:]
    m = xo * yo * zo
    g_flat = g.reshape(b, co, m)
    for kx in range(kxs):
        for ky in range(kys):
            for kz in range(kzs):
                sl = _offset_view(xp, kx, ky, kz, sx, sy, sz, xo, yo, zo)
                sl = np.ascontiguousarray(sl).reshape(b, ci, m)
                gw[:, :, kx, ky, kz] = np.matmul(g_flat, sl.transpose(0, 2, 1)).sum(axis=0)
    return gw
