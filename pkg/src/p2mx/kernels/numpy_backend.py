"""Pure numpy implementations of the hot kernels.

These mirror the compiled kernels in ``_core.pyx`` one-to-one; the package
selects one backend at import time (see ``kernels/__init__.py``).  Shapes:

    conv2d       x: (Ci, H, W)   w: (Co, Ci, kh, kw)   out: (Co, Ho, Wo)
    maxpool2     x: (C, H, W) with even H, W            out: (C, H/2, W/2)
    bilinear     fmap: (C, H, W), xs/ys: (P,)           out: (P, C)

All functions are dtype-preserving (float32 or float64 in, same out).
"""

import numpy as np


def _windows(xp, kh, kw, stride):
    # (Ci, Ho, Wo, kh, kw) view over the padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride, :, :]


def conv2d_forward(x, w, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride)
    return np.einsum("oikl,ihwkl->ohw", w, win, optimize=True).astype(x.dtype, copy=False)


def conv2d_backward_input(grad, w, x_shape, stride, pad):
    ci, h, wd = x_shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = grad.shape[1], grad.shape[2]
    # per-tap contribution, then strided slice-adds (targets are disjoint per tap)
    t = np.einsum("ohw,oikl->ihwkl", grad, w, optimize=True)
    dxp = np.zeros((ci, h + 2 * pad, wd + 2 * pad), dtype=grad.dtype)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += t[:, :, :, ky, kx]
    if pad:
        return dxp[:, pad:-pad, pad:-pad]
    return dxp


def conv2d_backward_weight(grad, x, w_shape, stride, pad):
    kh, kw = w_shape[2], w_shape[3]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride)
    return np.einsum("ohw,ihwkl->oikl", grad, win, optimize=True).astype(x.dtype, copy=False)


def maxpool2_forward(x):
    c, h, w = x.shape
    xr = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    # argmax picks the first maximal cell: deterministic tie routing
    am = np.argmax(xr, axis=3)
    out = np.take_along_axis(xr, am[..., None], axis=3)[..., 0]
    return out, am.astype(np.int64)


def maxpool2_backward(grad, argmax, x_shape):
    c, h, w = x_shape
    d4 = np.zeros((c, h // 2, w // 2, 4), dtype=grad.dtype)
    np.put_along_axis(d4, argmax[..., None], grad[..., None], axis=3)
    return d4.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def _corner_setup(fmap_shape, xs, ys):
    _, h, w = fmap_shape
    x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return x0, y0, x1, y1, fx, fy


def bilinear_forward(fmap, xs, ys):
    c, h, w = fmap.shape
    x0, y0, x1, y1, fx, fy = _corner_setup(fmap.shape, xs, ys)
    flat = fmap.reshape(c, h * w)
    f00 = flat[:, y0 * w + x0].T
    f01 = flat[:, y0 * w + x1].T
    f10 = flat[:, y1 * w + x0].T
    f11 = flat[:, y1 * w + x1].T
    fx = fx[:, None]
    fy = fy[:, None]
    return (
        f00 * (1 - fx) * (1 - fy)
        + f01 * fx * (1 - fy)
        + f10 * (1 - fx) * fy
        + f11 * fx * fy
    ).astype(fmap.dtype, copy=False)


def bilinear_backward(fmap, xs, ys, grad):
    """Returns (d_fmap, d_xs, d_ys) for upstream grad of shape (P, C)."""
    c, h, w = fmap.shape
    x0, y0, x1, y1, fx, fy = _corner_setup(fmap.shape, xs, ys)
    flat = fmap.reshape(c, h * w)
    f00 = flat[:, y0 * w + x0].T
    f01 = flat[:, y0 * w + x1].T
    f10 = flat[:, y1 * w + x0].T
    f11 = flat[:, y1 * w + x1].T

    fxc = fx[:, None]
    fyc = fy[:, None]
    dmap = np.zeros((h * w, c), dtype=grad.dtype)
    np.add.at(dmap, y0 * w + x0, grad * (1 - fxc) * (1 - fyc))
    np.add.at(dmap, y0 * w + x1, grad * fxc * (1 - fyc))
    np.add.at(dmap, y1 * w + x0, grad * (1 - fxc) * fyc)
    np.add.at(dmap, y1 * w + x1, grad * fxc * fyc)

    dxs = np.sum(grad * ((1 - fyc) * (f01 - f00) + fyc * (f11 - f10)), axis=1)
    dys = np.sum(grad * ((1 - fxc) * (f10 - f00) + fxc * (f11 - f01)), axis=1)
    return dmap.T.reshape(c, h, w).astype(fmap.dtype, copy=False), dxs, dys
