"""Shared test oracles: finite differences, naive convolution loops and a
reference Adam trace. These stay independent of the implementation paths
they check."""

import numpy as np

from voxrep.autograd import Tape, backward


def gradcheck(make_loss, tensors, h=1e-5, tol=1e-6):
    """Compare analytic gradients of ``make_loss()`` against central finite
    differences for every element of ``tensors``.

    The error is max|analytic - numeric| scaled by max(1, ||numeric||_inf),
    evaluated per tensor. Tensors must be float64 for the stated tolerance.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = make_loss()
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad) for t in tensors]

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = make_loss().item()
            flat[i] = orig - h
            f_minus = make_loss().item()
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2.0 * h)
        scale = max(1.0, float(np.abs(numeric).max()) if numeric.size else 0.0)
        err = float(np.abs(ana - numeric).max()) / scale if numeric.size else 0.0
        worst = max(worst, err)
    assert worst <= tol, f"gradcheck error {worst:.3e} exceeds {tol:.1e}"
    return worst


def conv3d_oracle(x, w, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Direct convolution via seven nested loops, accumulating in float64."""
    bsz, ci, ix, iy, iz = x.shape
    co, _, kx, ky, kz = w.shape
    sx, sy, sz = stride
    px, py, pz = padding
    xp = np.pad(np.asarray(x, dtype=np.float64),
                ((0, 0), (0, 0), (px, px), (py, py), (pz, pz)))
    wd = np.asarray(w, dtype=np.float64)
    ox = (ix + 2 * px - kx) // sx + 1
    oy = (iy + 2 * py - ky) // sy + 1
    oz = (iz + 2 * pz - kz) // sz + 1
    out = np.zeros((bsz, co, ox, oy, oz))
    for b in range(bsz):
        for o in range(co):
            for xo in range(ox):
                for yo in range(oy):
                    for zo in range(oz):
                        acc = 0.0
                        for i in range(ci):
                            for a in range(kx):
                                for c in range(ky):
                                    for d in range(kz):
                                        acc += (xp[b, i, xo * sx + a, yo * sy + c, zo * sz + d]
                                                * wd[o, i, a, c, d])
                        out[b, o, xo, yo, zo] = acc + (0.0 if bias is None else float(bias[o]))
    return out


def adam_reference_trace(x0, grad_fn, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam on a scalar, written independently of voxrep.optim."""
    x = float(x0)
    m = 0.0
    v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
        trace.append(x)
    return trace
