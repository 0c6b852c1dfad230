"""Differentiable structured operations: convolution, normalization,
resampling, affine maps and the voxel gather used to read representations
out of feature maps.

The 3D convolution dispatches to the active kernel backend (compiled or
numpy, see ``backend``). For unit stride the input gradient reuses the
forward kernel on spatially flipped, transposed weights, which is the
fastest path through either backend.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .autograd import Tensor, record
from .errors import ContractError

NORM_FLOOR = 1e-12


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ContractError(f"expected a triple, got {v!r}")
    return t


def _zero_pad5(x: np.ndarray, px: int, py: int, pz: int) -> np.ndarray:
    """Zero-pad the three spatial axes (faster than np.pad on this hot path)."""
    if px == py == pz == 0:
        return np.ascontiguousarray(x)
    b, c, ix, iy, iz = x.shape
    out = np.zeros((b, c, ix + 2 * px, iy + 2 * py, iz + 2 * pz), x.dtype)
    out[:, :, px:px + ix, py:py + iy, pz:pz + iz] = x
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Direct 3D convolution (cross-correlation convention).

    x: [B, Ci, X, Y, Z], weight: [Co, Ci, kx, ky, kz], bias: [Co] or None.
    Output extent per axis is floor((X + 2*pad - k) / stride) + 1.
    """
    sx, sy, sz = _triple(stride)
    px, py, pz = _triple(padding)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ContractError("conv3d expects 5-d input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ContractError(
            f"input channels {x.data.shape[1]} do not match weight channels {weight.data.shape[1]}")
    if min(sx, sy, sz) < 1:
        raise ContractError(f"stride components must be >= 1, got {(sx, sy, sz)}")
    if bias is not None and bias.data.shape != (weight.data.shape[0],):
        raise ContractError("bias shape must be (out_channels,)")

    b, ci, ix, iy, iz = x.data.shape
    co, _, kx, ky, kz = weight.data.shape
    padded = (ix + 2 * px, iy + 2 * py, iz + 2 * pz)
    if kx > padded[0] or ky > padded[1] or kz > padded[2]:
        raise ContractError(f"kernel {(kx, ky, kz)} exceeds padded input {padded}")
    ox = (padded[0] - kx) // sx + 1
    oy = (padded[1] - ky) // sy + 1
    oz = (padded[2] - kz) // sz + 1

    if (kx, ky, kz) == (1, 1, 1) and (sx, sy, sz) == (1, 1, 1) and (px, py, pz) == (0, 0, 0):
        return _conv3d_pointwise(x, weight, bias)

    kern = backend.active()
    xp = _zero_pad5(x.data, px, py, pz)
    wd = np.ascontiguousarray(weight.data)
    out_data = np.zeros((b, co, ox, oy, oz), dtype=x.data.dtype)
    kern.conv3d_forward(xp, wd, sx, sy, sz, out_data)
    if bias is not None:
        out_data += bias.data.reshape(1, co, 1, 1, 1)
    out = Tensor(out_data)

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad:
            if (sx, sy, sz) == (1, 1, 1):
                wf = np.ascontiguousarray(
                    wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gp = _zero_pad5(g, kx - 1, ky - 1, kz - 1)
                gxp = np.zeros_like(xp)
                kern.conv3d_forward(gp, wf, 1, 1, 1, gxp)
            else:
                gxp = np.zeros_like(xp)
                kern.conv3d_backward_input(g, wd, sx, sy, sz, gxp)
            gx = gxp[:, :, px:px + ix, py:py + iy, pz:pz + iz]
        if weight.requires_grad:
            gw = np.zeros_like(wd)
            kern.conv3d_backward_weight(g, xp, sx, sy, sz, gw)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record(out, inputs, bwd if bias is not None else (lambda g: bwd(g)[:2]))
    return out


def _conv3d_pointwise(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """1x1x1 stride-1 convolution as a batched matmul (BLAS path)."""
    b, ci = x.data.shape[:2]
    spatial = x.data.shape[2:]
    co = weight.data.shape[0]
    m = int(np.prod(spatial))
    x2 = np.ascontiguousarray(x.data).reshape(b, ci, m)
    w2 = weight.data.reshape(co, ci)
    out2 = np.matmul(w2[None], x2)
    if bias is not None:
        out2 += bias.data.reshape(1, co, 1)
    out = Tensor(out2.reshape(b, co, *spatial))

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(b, co, m)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2.T[None], g2).reshape(x.data.shape)
        if weight.requires_grad:
            gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record(out, inputs, bwd if bias is not None else (lambda g: bwd(g)[:2]))
    return out


def instance_norm3d(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel) slice to zero mean, unit variance,
    then apply per-channel scale and shift."""
    if x.data.ndim != 5:
        raise ContractError("instance_norm3d expects [B, C, X, Y, Z]")
    spatial = int(np.prod(x.data.shape[2:]))
    if spatial < 2 and eps <= 0:
        raise ContractError("instance_norm3d on a single voxel needs eps > 0 (division guard)")
    axes = (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    c = x.data.shape[1]
    out = Tensor(scale.data.reshape(1, c, 1, 1, 1) * xhat + shift.data.reshape(1, c, 1, 1, 1))

    def bwd(g):
        gx = gscale = gshift = None
        if x.requires_grad:
            gh = g * scale.data.reshape(1, c, 1, 1, 1)
            gmean = gh.mean(axis=axes, keepdims=True)
            gxhat_mean = (gh * xhat).mean(axis=axes, keepdims=True)
            gx = (gh - gmean - xhat * gxhat_mean) / std
        if scale.requires_grad:
            gscale = (g * xhat).sum(axis=(0, 2, 3, 4))
        if shift.requires_grad:
            gshift = g.sum(axis=(0, 2, 3, 4))
        return gx, gscale, gshift

    record(out, (x, scale, shift), bwd)
    return out


def nearest_upsample3d(x: Tensor, factor) -> Tensor:
    """Repeat each voxel factor times per axis: out[..., i] = in[..., i // f]."""
    fx, fy, fz = _triple(factor)
    if min(fx, fy, fz) < 1:
        raise ContractError(f"upsample factors must be >= 1, got {(fx, fy, fz)}")
    if (fx, fy, fz) == (1, 1, 1):
        up = x.data
    else:
        b, c, ix, iy, iz = x.data.shape
        up = np.broadcast_to(
            x.data[:, :, :, None, :, None, :, None],
            (b, c, ix, fx, iy, fy, iz, fz),
        ).reshape(b, c, ix * fx, iy * fy, iz * fz)
    out = Tensor(np.ascontiguousarray(up))

    def bwd(g):
        if (fx, fy, fz) == (1, 1, 1):
            return (g,)
        b, c, ix, iy, iz = x.data.shape
        return (g.reshape(b, c, ix, fx, iy, fy, iz, fz).sum(axis=(3, 5, 7)),)

    record(out, (x,), bwd)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: y = x @ weight.T + bias."""
    d_out, d_in = weight.data.shape
    if x.data.shape[-1] != d_in:
        raise ContractError(f"linear expects trailing dim {d_in}, got {x.data.shape[-1]}")
    lead = x.data.shape[:-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, d_in)
    y2 = x2 @ weight.data.T
    if bias is not None:
        y2 += bias.data
    out = Tensor(y2.reshape(*lead, d_out))

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.data.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record(out, inputs, bwd if bias is not None else (lambda g: bwd(g)[:2]))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError("matmul expects 2-d operands")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    record(out, (a, b), bwd)
    return out


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each trailing-axis vector to unit norm, with a floor of
    NORM_FLOOR on the divisor so zero vectors stay zero."""
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    m = np.maximum(norms, NORM_FLOOR)
    y = x.data / m
    out = Tensor(y)

    def bwd(g):
        active = norms > NORM_FLOOR
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - active * y * dot) / m,)

    record(out, (x,), bwd)
    return out


def gather_voxels(feature_map: Tensor, batch_idx: np.ndarray, coords: np.ndarray) -> Tensor:
    """Read per-voxel feature vectors: out[n, :] = map[batch_idx[n], :, x, y, z].

    coords is integer [N, 3]; the gradient scatter-adds back into the map.
    """
    b, c = feature_map.data.shape[:2]
    spatial = feature_map.data.shape[2:]
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ContractError("coords must be [N, 3]")
    if batch_idx.min(initial=0) < 0 or batch_idx.max(initial=-1) >= b:
        raise ContractError("batch index out of range")
    for axis in range(3):
        col = coords[:, axis]
        if col.size and (col.min() < 0 or col.max() >= spatial[axis]):
            raise ContractError(
                f"voxel coordinate out of range on axis {axis}: extent {spatial[axis]}")
    xs, ys, zs = coords[:, 0], coords[:, 1], coords[:, 2]
    out = Tensor(feature_map.data[batch_idx, :, xs, ys, zs])

    def bwd(g):
        gm = np.zeros_like(feature_map.data)
        np.add.at(gm, (batch_idx, slice(None), xs, ys, zs), g)
        return (gm,)

    record(out, (feature_map,), bwd)
    return out
