"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback path for machines without a working numba install; selected with
CGLDETECT_BACKEND=numpy.  Signatures mirror kernels_numba exactly.
"""

import numpy as np


def _im2col(xp, kh, kw, stride, ho, wo):
    # (ci*kh*kw, ho*wo) patch matrix built from kh*kw strided slices
    ci = xp.shape[0]
    cols = np.empty((ci, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride]
    return cols.reshape(ci * kh * kw, ho * wo)


def conv2d_forward(xp, k, stride):
    """Cross-correlate padded input xp (ci,Hp,Wp) with k (co,ci,kh,kw)."""
    co, ci, kh, kw = k.shape
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = k.reshape(co, ci * kh * kw) @ cols
    return np.ascontiguousarray(out.reshape(co, ho, wo))


def conv2d_grad_kernel(gout, xp, kh, kw, stride):
    co, ho, wo = gout.shape
    ci = xp.shape[0]
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    gk = gout.reshape(co, ho * wo) @ cols.T
    return np.ascontiguousarray(gk.reshape(co, ci, kh, kw))


def conv2d_grad_input(gout, k, hp, wp, stride):
    """Gradient w.r.t. the padded input (col2im fold of k^T @ gout)."""
    co, ci, kh, kw = k.shape
    _, ho, wo = gout.shape
    colsg = k.reshape(co, ci * kh * kw).T @ gout.reshape(co, ho * wo)
    colsg = colsg.reshape(ci, kh, kw, ho, wo)
    gxp = np.zeros((ci, hp, wp), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += colsg[:, i, j]
    return gxp


def correlate2d_valid(xp, k2d):
    """Single-plane valid cross-correlation; accumulation runs in row-major
    kernel order so results are bit-comparable with a scalar loop."""
    kh, kw = k2d.shape
    ho = xp.shape[0] - kh + 1
    wo = xp.shape[1] - kw + 1
    out = np.zeros((ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += k2d[i, j] * xp[i : i + ho, j : j + wo]
    return out
