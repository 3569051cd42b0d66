"""NumPy fallback for the hot kernels (convolution, bilinear resize).

Correctness reference for the compiled extension; selected automatically
when the extension is unavailable. Convolutions use an im2col layout so the
inner product runs through BLAS.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "reference"


def _patches(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # xp: padded (N, C, Hp, Wp) -> (N*OH*OW, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,OH,OW,kh,kw
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int) -> np.ndarray:
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = h + 2 * pad - kh + 1
    ow = wd + 2 * pad - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _patches(xp, kh, kw)
    out = cols @ w.reshape(co, -1).T
    out += b[None, :]
    return out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2).copy()


def conv2d_grad_input(gout: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    # full correlation with the flipped, channel-transposed kernel
    kh, kw = w.shape[2], w.shape[3]
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zero_bias = np.zeros(wt.shape[0], dtype=gout.dtype)
    return conv2d_forward(gout, wt, zero_bias, kh - 1 - pad)


def conv2d_grad_weight(x: np.ndarray, gout: np.ndarray, pad: int, kh: int, kw: int) -> np.ndarray:
    n, ci, h, wd = x.shape
    co = gout.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _patches(xp, kh, kw)  # (N*OH*OW, C*kh*kw)
    gmat = gout.transpose(0, 2, 3, 1).reshape(-1, co)
    return (gmat.T @ cols).reshape(co, ci, kh, kw)


def _bilinear_axis(in_len: int, out_len: int):
    # align-corners: endpoints map to endpoints; a single-pixel axis replicates
    if in_len == 1 or out_len == 1:
        i0 = np.zeros(out_len, dtype=np.intp)
        return i0, i0.copy(), np.zeros(out_len)
    src = np.arange(out_len) * ((in_len - 1) / (out_len - 1))
    lo = np.floor(src).astype(np.intp)
    lo = np.minimum(lo, in_len - 2)
    frac = src - lo
    return lo, lo + 1, frac


def bilinear_forward(x: np.ndarray, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x.shape
    y0, y1, fy = _bilinear_axis(h, oh)
    x0, x1, fx = _bilinear_axis(w, ow)
    fy = fy[:, None].astype(x.dtype)
    fx = fx[None, :].astype(x.dtype)
    top = x[:, :, y0[:, None], x0[None, :]] * (1 - fx) + x[:, :, y0[:, None], x1[None, :]] * fx
    bot = x[:, :, y1[:, None], x0[None, :]] * (1 - fx) + x[:, :, y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def bilinear_grad_input(gout: np.ndarray, ih: int, iw: int) -> np.ndarray:
    n, c, oh, ow = gout.shape
    y0, y1, fy = _bilinear_axis(ih, oh)
    x0, x1, fx = _bilinear_axis(iw, ow)
    fy = fy[:, None]
    fx = fx[None, :]
    gx = np.zeros((n, c, ih, iw), dtype=gout.dtype)
    yy0 = y0[:, None]
    yy1 = y1[:, None]
    xx0 = x0[None, :]
    xx1 = x1[None, :]
    np.add.at(gx, (slice(None), slice(None), yy0, xx0), gout * ((1 - fy) * (1 - fx)).astype(gout.dtype))
    np.add.at(gx, (slice(None), slice(None), yy0, xx1), gout * ((1 - fy) * fx).astype(gout.dtype))
    np.add.at(gx, (slice(None), slice(None), yy1, xx0), gout * (fy * (1 - fx)).astype(gout.dtype))
    np.add.at(gx, (slice(None), slice(None), yy1, xx1), gout * (fy * fx).astype(gout.dtype))
    return gx
