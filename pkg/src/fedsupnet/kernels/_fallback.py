"""Pure-numpy implementations of the convolution inner loops.

Same call signatures as the compiled core (fedsupnet.kernels._core).
Inputs named ``x`` are already padded; callers handle padding and cropping.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _patches(x, k, stride):
    """Sliding k-by-k windows of x as a [B, C, k, k, Ho, Wo] view."""
    b, c, hp, wp = x.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sb, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(b, c, k, k, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )


def im2col(x, k, stride):
    """Unfold padded input into columns [B, C*k*k, Ho*Wo] (c-major rows)."""
    b, c = x.shape[:2]
    p = _patches(x, k, stride)
    ho, wo = p.shape[4], p.shape[5]
    return p.reshape(b, c * k * k, ho * wo)


def col2im(cols, c, hp, wp, k, stride):
    """Scatter-add columns back onto a zeroed [B, C, Hp, Wp] image."""
    b = cols.shape[0]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[
                :, :, i, j
            ]
    return out


def depthwise_forward(x, w, stride):
    """Per-channel conv of padded x [B,C,Hp,Wp] with kernels w [C,k,k]."""
    k = w.shape[1]
    p = _patches(x, k, stride)
    return np.einsum("bcijhw,cij->bchw", p, w)


def depthwise_backward(gout, x, w, stride):
    """Gradients of depthwise_forward: returns (gx_padded, gw)."""
    k = w.shape[1]
    b, c, hp, wp = x.shape
    ho, wo = gout.shape[2], gout.shape[3]
    p = _patches(x, k, stride)
    gw = np.einsum("bchw,bcijhw->cij", gout, p)
    gx = np.zeros((b, c, hp, wp), dtype=gout.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                gout * w[:, i, j][None, :, None, None]
            )
    return gx, gw
