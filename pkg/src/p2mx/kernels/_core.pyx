# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the hot inner loops.

Mirrors kernels/numpy_backend.py exactly (same signatures, same tie rules).
Inputs must be C-contiguous; the autodiff layer guarantees that.
"""

import numpy as np

cimport cython
from cython cimport floating


def conv2d_forward(floating[:, :, ::1] x, floating[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t ci = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((co, ho, wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t o, c, y, xx, ky, kx, iy, ix
    cdef floating acc
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                acc = 0
                for c in range(ci):
                    for ky in range(kh):
                        iy = y * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = xx * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            acc += w[o, c, ky, kx] * x[c, iy, ix]
                out[o, y, xx] = acc
    return out_arr


def conv2d_backward_input(floating[:, :, ::1] grad, floating[:, :, :, ::1] w,
                          x_shape, int stride, int pad):
    cdef Py_ssize_t ci = x_shape[0], h = x_shape[1], wd = x_shape[2]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = grad.shape[1], wo = grad.shape[2]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((ci, h, wd), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t o, c, y, xx, ky, kx, iy, ix
    cdef floating g
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                g = grad[o, y, xx]
                for c in range(ci):
                    for ky in range(kh):
                        iy = y * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = xx * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            dx[c, iy, ix] += g * w[o, c, ky, kx]
    return dx_arr


def conv2d_backward_weight(floating[:, :, ::1] grad, floating[:, :, ::1] x,
                           w_shape, int stride, int pad):
    cdef Py_ssize_t co = w_shape[0], ci = w_shape[1], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ho = grad.shape[1], wo = grad.shape[2]
    dtype = np.float32 if floating is float else np.float64
    dw_arr = np.zeros((co, ci, kh, kw), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t o, c, y, xx, ky, kx, iy, ix
    cdef floating g
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                g = grad[o, y, xx]
                for c in range(ci):
                    for ky in range(kh):
                        iy = y * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = xx * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            dw[o, c, ky, kx] += g * x[c, iy, ix]
    return dw_arr


def maxpool2_forward(floating[:, :, ::1] x):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t h2 = h // 2, w2 = w // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((c, h2, w2), dtype=dtype)
    am_arr = np.empty((c, h2, w2), dtype=np.int64)
    cdef floating[:, :, ::1] out = out_arr
    cdef long long[:, :, ::1] am = am_arr
    cdef Py_ssize_t ch, y, xx, ky, kx, k
    cdef floating best, v
    cdef Py_ssize_t besti
    for ch in range(c):
        for y in range(h2):
            for xx in range(w2):
                best = x[ch, 2 * y, 2 * xx]
                besti = 0
                k = 0
                for ky in range(2):
                    for kx in range(2):
                        v = x[ch, 2 * y + ky, 2 * xx + kx]
                        if v > best:
                            best = v
                            besti = k
                        k += 1
                out[ch, y, xx] = best
                am[ch, y, xx] = besti
    return out_arr, am_arr


def maxpool2_backward(floating[:, :, ::1] grad, long long[:, :, ::1] argmax, x_shape):
    cdef Py_ssize_t c = x_shape[0], h = x_shape[1], w = x_shape[2]
    cdef Py_ssize_t h2 = h // 2, w2 = w // 2
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((c, h, w), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t ch, y, xx, k
    for ch in range(c):
        for y in range(h2):
            for xx in range(w2):
                k = argmax[ch, y, xx]
                dx[ch, 2 * y + k // 2, 2 * xx + k % 2] = grad[ch, y, xx]
    return dx_arr


def bilinear_forward(floating[:, :, ::1] fmap, floating[::1] xs, floating[::1] ys):
    cdef Py_ssize_t c = fmap.shape[0], h = fmap.shape[1], w = fmap.shape[2]
    cdef Py_ssize_t p = xs.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((p, c), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, ch, x0, y0, x1, y1
    cdef floating fx, fy, w00, w01, w10, w11
    cdef Py_ssize_t xmax = w - 2 if w >= 2 else 0
    cdef Py_ssize_t ymax = h - 2 if h >= 2 else 0
    for i in range(p):
        x0 = <Py_ssize_t> xs[i]
        if x0 > xmax:
            x0 = xmax
        y0 = <Py_ssize_t> ys[i]
        if y0 > ymax:
            y0 = ymax
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fx = xs[i] - x0
        fy = ys[i] - y0
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        for ch in range(c):
            out[i, ch] = (w00 * fmap[ch, y0, x0] + w01 * fmap[ch, y0, x1]
                          + w10 * fmap[ch, y1, x0] + w11 * fmap[ch, y1, x1])
    return out_arr


def bilinear_backward(floating[:, :, ::1] fmap, floating[::1] xs, floating[::1] ys,
                      floating[:, ::1] grad):
    cdef Py_ssize_t c = fmap.shape[0], h = fmap.shape[1], w = fmap.shape[2]
    cdef Py_ssize_t p = xs.shape[0]
    dtype = np.float32 if floating is float else np.float64
    dmap_arr = np.zeros((c, h, w), dtype=dtype)
    dxs_arr = np.zeros(p, dtype=dtype)
    dys_arr = np.zeros(p, dtype=dtype)
    cdef floating[:, :, ::1] dmap = dmap_arr
    cdef floating[::1] dxs = dxs_arr
    cdef floating[::1] dys = dys_arr
    cdef Py_ssize_t i, ch, x0, y0, x1, y1
    cdef floating fx, fy, g, f00, f01, f10, f11, accx, accy
    cdef Py_ssize_t xmax = w - 2 if w >= 2 else 0
    cdef Py_ssize_t ymax = h - 2 if h >= 2 else 0
    for i in range(p):
        x0 = <Py_ssize_t> xs[i]
        if x0 > xmax:
            x0 = xmax
        y0 = <Py_ssize_t> ys[i]
        if y0 > ymax:
            y0 = ymax
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fx = xs[i] - x0
        fy = ys[i] - y0
        accx = 0
        accy = 0
        for ch in range(c):
            g = grad[i, ch]
            f00 = fmap[ch, y0, x0]
            f01 = fmap[ch, y0, x1]
            f10 = fmap[ch, y1, x0]
            f11 = fmap[ch, y1, x1]
            dmap[ch, y0, x0] += g * (1 - fx) * (1 - fy)
            dmap[ch, y0, x1] += g * fx * (1 - fy)
            dmap[ch, y1, x0] += g * (1 - fx) * fy
            dmap[ch, y1, x1] += g * fx * fy
            accx += g * ((1 - fy) * (f01 - f00) + fy * (f11 - f10))
            accy += g * ((1 - fx) * (f10 - f00) + fx * (f11 - f01))
        dxs[i] = accx
        dys[i] = accy
    return dmap_arr, dxs_arr, dys_arr
