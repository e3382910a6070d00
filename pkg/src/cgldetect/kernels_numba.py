"""Numba-compiled convolution kernels.

Hot inner loops of the package.  Per output element the reduction runs in
(channel, row, col) kernel order, matching the naive nested-loop definition
term for term, so forward results are bit-identical to a scalar reference
in the same dtype.  Stride-1 cases take a unit-stride specialization whose
inner loops vectorize; the generic path handles other strides.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(xp, k, stride):
    co, ci, kh, kw = k.shape
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((co, ho, wo), dtype=xp.dtype)
    if stride == 1:
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        w = k[o, c, i, j]
                        for y in range(ho):
                            row = xp[c, y + i]
                            orow = out[o, y]
                            for x in range(wo):
                                orow[x] += w * row[x + j]
    else:
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        w = k[o, c, i, j]
                        for y in range(ho):
                            yi = y * stride + i
                            for x in range(wo):
                                out[o, y, x] += w * xp[c, yi, x * stride + j]
    return out


@njit(cache=True, fastmath=True)
def conv2d_grad_kernel(gout, xp, kh, kw, stride):
    co, ho, wo = gout.shape
    ci = xp.shape[0]
    gk = np.zeros((co, ci, kh, kw), dtype=gout.dtype)
    if stride == 1:
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        acc = gk[o, c, i, j]
                        for y in range(ho):
                            grow = gout[o, y]
                            row = xp[c, y + i]
                            for x in range(wo):
                                acc += grow[x] * row[x + j]
                        gk[o, c, i, j] = acc
    else:
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        acc = gk[o, c, i, j]
                        for y in range(ho):
                            yi = y * stride + i
                            for x in range(wo):
                                acc += gout[o, y, x] * xp[c, yi, x * stride + j]
                        gk[o, c, i, j] = acc
    return gk


@njit(cache=True)
def conv2d_grad_input(gout, k, hp, wp, stride):
    co, ci, kh, kw = k.shape
    ho, wo = gout.shape[1], gout.shape[2]
    gxp = np.zeros((ci, hp, wp), dtype=gout.dtype)
    if stride == 1:
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        w = k[o, c, i, j]
                        for y in range(ho):
                            grow = gout[o, y]
                            gxrow = gxp[c, y + i]
                            for x in range(wo):
                                gxrow[x + j] += w * grow[x]
    else:
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        w = k[o, c, i, j]
                        for y in range(ho):
                            yi = y * stride + i
                            for x in range(wo):
                                gxp[c, yi, x * stride + j] += w * gout[o, y, x]
    return gxp


@njit(cache=True)
def correlate2d_valid(xp, k2d):
    kh, kw = k2d.shape
    ho = xp.shape[0] - kh + 1
    wo = xp.shape[1] - kw + 1
    out = np.zeros((ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            w = k2d[i, j]
            for y in range(ho):
                row = xp[y + i]
                orow = out[y]
                for x in range(wo):
                    orow[x] += w * row[x + j]
    return out
