"""Convolution inner loops, numba and numpy flavours.

All kernels take an input that is already zero-padded, NHWC layout, and the
output spatial size. The numpy versions loop over kernel taps and do strided
slab arithmetic; the numba versions loop over output elements. Both are
exported so tests and the benchmark can compare them; the unprefixed names
dispatch according to ``ldrnet._accel.USE_NUMBA``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .._accel import USE_NUMBA, njit


def _tap(xp, i, j, stride, oh, ow):
    return xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :]


# ---------------------------------------------------------------- numpy path

def dw_forward_numpy(xp, k, stride, oh, ow):
    b, _, _, c = xp.shape
    kh, kw, _ = k.shape
    out = np.zeros((b, oh, ow, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, stride, oh, ow) * k[i, j]
    return out


def dw_backward_numpy(xp, k, g, stride):
    kh, kw, c = k.shape
    _, oh, ow, _ = g.shape
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for i in range(kh):
        for j in range(kw):
            _tap(dxp, i, j, stride, oh, ow)[...] += g * k[i, j]
            dk[i, j] = np.einsum("bhwc,bhwc->c", _tap(xp, i, j, stride, oh, ow), g)
    return dxp, dk


def im2col_numpy(xp, kh, kw, stride, oh, ow):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # b, H', W', c, kh, kw
    win = win[:, :stride * (oh - 1) + 1:stride, :stride * (ow - 1) + 1:stride]
    b, _, _, c = xp.shape
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * oh * ow, kh * kw * c)


def col2im_numpy(cols, xp_shape, kh, kw, stride, oh, ow):
    b, _, _, c = xp_shape
    cols = cols.reshape(b, oh, ow, kh, kw, c)
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            _tap(dxp, i, j, stride, oh, ow)[...] += cols[:, :, :, i, j, :]
    return dxp


# ---------------------------------------------------------------- numba path

@njit
def dw_forward_numba(xp, k, stride, oh, ow):
    b_, _, _, c_ = xp.shape
    kh, kw, _ = k.shape
    out = np.zeros((b_, oh, ow, c_), dtype=xp.dtype)
    for b in range(b_):
        for y in range(oh):
            for x in range(ow):
                for i in range(kh):
                    for j in range(kw):
                        yy = y * stride + i
                        xx = x * stride + j
                        for c in range(c_):
                            out[b, y, x, c] += xp[b, yy, xx, c] * k[i, j, c]
    return out


@njit
def dw_backward_numba(xp, k, g, stride):
    kh, kw, c_ = k.shape
    b_, oh, ow, _ = g.shape
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for b in range(b_):
        for y in range(oh):
            for x in range(ow):
                for i in range(kh):
                    for j in range(kw):
                        yy = y * stride + i
                        xx = x * stride + j
                        for c in range(c_):
                            gv = g[b, y, x, c]
                            dxp[b, yy, xx, c] += gv * k[i, j, c]
                            dk[i, j, c] += gv * xp[b, yy, xx, c]
    return dxp, dk


@njit
def im2col_numba(xp, kh, kw, stride, oh, ow):
    b_, _, _, c_ = xp.shape
    cols = np.empty((b_ * oh * ow, kh * kw * c_), dtype=xp.dtype)
    r = 0
    for b in range(b_):
        for y in range(oh):
            for x in range(ow):
                q = 0
                for i in range(kh):
                    for j in range(kw):
                        for c in range(c_):
                            cols[r, q] = xp[b, y * stride + i, x * stride + j, c]
                            q += 1
                r += 1
    return cols


@njit
def _col2im_numba(cols, dxp, kh, kw, stride, oh, ow):
    b_, _, _, c_ = dxp.shape
    r = 0
    for b in range(b_):
        for y in range(oh):
            for x in range(ow):
                q = 0
                for i in range(kh):
                    for j in range(kw):
                        for c in range(c_):
                            dxp[b, y * stride + i, x * stride + j, c] += cols[r, q]
                            q += 1
                r += 1
    return dxp


def col2im_numba(cols, xp_shape, kh, kw, stride, oh, ow):
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    return _col2im_numba(np.ascontiguousarray(cols), dxp, kh, kw, stride, oh, ow)


# ---------------------------------------------------------------- dispatch

if USE_NUMBA:
    def dw_forward(xp, k, stride, oh, ow):
        return dw_forward_numba(np.ascontiguousarray(xp), np.ascontiguousarray(k), stride, oh, ow)

    def dw_backward(xp, k, g, stride):
        return dw_backward_numba(np.ascontiguousarray(xp), np.ascontiguousarray(k),
                                 np.ascontiguousarray(g), stride)

    def im2col(xp, kh, kw, stride, oh, ow):
        return im2col_numba(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)

    col2im = col2im_numba
else:
    dw_forward = dw_forward_numpy
    dw_backward = dw_backward_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy
