# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the training hot loop.

Convolutions run as a C im2col gather followed by a single BLAS GEMM,
avoiding the intermediate copies the NumPy fallback makes; bilinear resize
is a direct gather/scatter. All kernels handle f32 and f64.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

NAME = "native"

ctypedef fused real:
    float
    double


cdef void _gemm_rm(bint ta, bint tb, int M, int N, int K,
                   real* A, int lda, real* B, int ldb,
                   real* C, int ldc) noexcept nogil:
    """C_rm(M,N) = opa(A) @ opb(B) on row-major buffers.

    lda/ldb/ldc are row lengths. Implemented through the column-major BLAS
    by computing C^T with swapped operands.
    """
    cdef char fa = b'T' if ta else b'N'
    cdef char fb = b'T' if tb else b'N'
    cdef real one = <real> 1, zero = <real> 0
    if real is float:
        sgemm(&fb, &fa, &N, &M, &K, &one, B, &ldb, A, &lda, &zero, C, &ldc)
    else:
        dgemm(&fb, &fa, &N, &M, &K, &one, B, &ldb, A, &lda, &zero, C, &ldc)


cdef void _im2col(real[:, :, :, ::1] x, real[:, ::1] cols,
                  int pad, int kh, int kw, int OH, int OW) noexcept nogil:
    cdef Py_ssize_t N = x.shape[0], I = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, oy, ox, i, u, v, r, c, yy, xx
    for n in range(N):
        for oy in range(OH):
            for ox in range(OW):
                r = (n * OH + oy) * OW + ox
                c = 0
                for i in range(I):
                    for u in range(kh):
                        yy = oy - pad + u
                        for v in range(kw):
                            xx = ox - pad + v
                            if 0 <= yy < H and 0 <= xx < W:
                                cols[r, c] = x[n, i, yy, xx]
                            else:
                                cols[r, c] = <real> 0
                            c += 1


cdef void _scatter_out(real[:, ::1] out_mat, real[::1] b,
                       real[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t N = out.shape[0], O = out.shape[1], OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t n, o, oy, ox, r
    for n in range(N):
        for oy in range(OH):
            for ox in range(OW):
                r = (n * OH + oy) * OW + ox
                for o in range(O):
                    out[n, o, oy, ox] = out_mat[r, o] + b[o]


cdef void _gather_gout(real[:, :, :, ::1] gout, real[:, ::1] gmat) noexcept nogil:
    cdef Py_ssize_t N = gout.shape[0], O = gout.shape[1], OH = gout.shape[2], OW = gout.shape[3]
    cdef Py_ssize_t n, o, oy, ox, r
    for n in range(N):
        for oy in range(OH):
            for ox in range(OW):
                r = (n * OH + oy) * OW + ox
                for o in range(O):
                    gmat[r, o] = gout[n, o, oy, ox]


cdef void _conv_fwd_typed(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                          int pad, real[:, ::1] cols, real[:, ::1] out_mat,
                          real[:, :, :, ::1] out):
    cdef int M = <int> cols.shape[0], K = <int> cols.shape[1], O = <int> w.shape[0]
    cdef int kh = <int> w.shape[2], kw = <int> w.shape[3]
    cdef int OH = <int> out.shape[2], OW = <int> out.shape[3]
    with nogil:
        _im2col(x, cols, pad, kh, kw, OH, OW)
        # out_mat(M,O) = cols(M,K) @ w(O,K)^T
        _gemm_rm(False, True, M, O, K, &cols[0, 0], K, &w[0, 0, 0, 0], K, &out_mat[0, 0], O)
        _scatter_out(out_mat, b, out)


def conv2d_forward(x, w, b, int pad):
    cdef int kh = w.shape[2], kw = w.shape[3]
    N, I, H, W = x.shape
    O = w.shape[0]
    OH = H + 2 * pad - kh + 1
    OW = W + 2 * pad - kw + 1
    cols = np.empty((N * OH * OW, I * kh * kw), dtype=x.dtype)
    out_mat = np.empty((N * OH * OW, O), dtype=x.dtype)
    out = np.empty((N, O, OH, OW), dtype=x.dtype)
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    b = np.ascontiguousarray(b)
    if x.dtype == np.float32:
        _conv_fwd_typed[float](x, w, b, pad, cols, out_mat, out)
    else:
        _conv_fwd_typed[double](x, w, b, pad, cols, out_mat, out)
    return out


def conv2d_grad_input(gout, w, int pad):
    cdef int kh = w.shape[2]
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zb = np.zeros(wt.shape[0], dtype=gout.dtype)
    return conv2d_forward(gout, wt, zb, kh - 1 - pad)


cdef void _conv_gw_typed(real[:, :, :, ::1] x, real[:, :, :, ::1] gout, int pad,
                         real[:, ::1] cols, real[:, ::1] gmat, real[:, :, :, ::1] gw):
    cdef int M = <int> cols.shape[0], K = <int> cols.shape[1], O = <int> gout.shape[1]
    cdef int kh = <int> gw.shape[2], kw = <int> gw.shape[3]
    cdef int OH = <int> gout.shape[2], OW = <int> gout.shape[3]
    with nogil:
        _im2col(x, cols, pad, kh, kw, OH, OW)
        _gather_gout(gout, gmat)
        # gw(O,K) = gmat(M,O)^T @ cols(M,K)
        _gemm_rm(True, False, O, K, M, &gmat[0, 0], O, &cols[0, 0], K, &gw[0, 0, 0, 0], K)


def conv2d_grad_weight(x, gout, int pad, int kh, int kw):
    N, I, H, W = x.shape
    O = gout.shape[1]
    OH, OW = gout.shape[2], gout.shape[3]
    cols = np.empty((N * OH * OW, I * kh * kw), dtype=x.dtype)
    gmat = np.empty((N * OH * OW, O), dtype=x.dtype)
    gw = np.empty((O, I, kh, kw), dtype=x.dtype)
    x = np.ascontiguousarray(x)
    gout = np.ascontiguousarray(gout)
    if x.dtype == np.float32:
        _conv_gw_typed[float](x, gout, pad, cols, gmat, gw)
    else:
        _conv_gw_typed[double](x, gout, pad, cols, gmat, gw)
    return gw


cdef void _bilin_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                     Py_ssize_t[::1] y0, Py_ssize_t[::1] y1, double[::1] fy,
                     Py_ssize_t[::1] x0, Py_ssize_t[::1] x1, double[::1] fx) noexcept nogil:
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef double wy, wx, top, bot
    for n in range(N):
        for c in range(C):
            for i in range(OH):
                wy = fy[i]
                for j in range(OW):
                    wx = fx[j]
                    top = x[n, c, y0[i], x0[j]] * (1 - wx) + x[n, c, y0[i], x1[j]] * wx
                    bot = x[n, c, y1[i], x0[j]] * (1 - wx) + x[n, c, y1[i], x1[j]] * wx
                    out[n, c, i, j] = <real> (top * (1 - wy) + bot * wy)


cdef void _bilin_bwd(real[:, :, :, ::1] gout, real[:, :, :, ::1] gx,
                     Py_ssize_t[::1] y0, Py_ssize_t[::1] y1, double[::1] fy,
                     Py_ssize_t[::1] x0, Py_ssize_t[::1] x1, double[::1] fx) noexcept nogil:
    cdef Py_ssize_t N = gout.shape[0], C = gout.shape[1], OH = gout.shape[2], OW = gout.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef double wy, wx, g
    for n in range(N):
        for c in range(C):
            for i in range(OH):
                wy = fy[i]
                for j in range(OW):
                    wx = fx[j]
                    g = gout[n, c, i, j]
                    gx[n, c, y0[i], x0[j]] += <real> (g * (1 - wy) * (1 - wx))
                    gx[n, c, y0[i], x1[j]] += <real> (g * (1 - wy) * wx)
                    gx[n, c, y1[i], x0[j]] += <real> (g * wy * (1 - wx))
                    gx[n, c, y1[i], x1[j]] += <real> (g * wy * wx)


def _axis(Py_ssize_t in_len, Py_ssize_t out_len):
    if in_len == 1 or out_len == 1:
        lo = np.zeros(out_len, dtype=np.intp)
        return lo, lo.copy(), np.zeros(out_len)
    cdef double scale = (<double> (in_len - 1)) / (<double> (out_len - 1))
    src = np.arange(out_len) * scale
    lo = np.minimum(np.floor(src).astype(np.intp), in_len - 2)
    return lo, lo + 1, src - lo


def bilinear_forward(x, Py_ssize_t oh, Py_ssize_t ow):
    y0, y1, fy = _axis(x.shape[2], oh)
    x0, x1, fx = _axis(x.shape[3], ow)
    x = np.ascontiguousarray(x)
    out = np.empty((x.shape[0], x.shape[1], oh, ow), dtype=x.dtype)
    if x.dtype == np.float32:
        _bilin_fwd[float](x, out, y0, y1, fy, x0, x1, fx)
    else:
        _bilin_fwd[double](x, out, y0, y1, fy, x0, x1, fx)
    return out


def bilinear_grad_input(gout, Py_ssize_t ih, Py_ssize_t iw):
    y0, y1, fy = _axis(ih, gout.shape[2])
    x0, x1, fx = _axis(iw, gout.shape[3])
    gout = np.ascontiguousarray(gout)
    gx = np.zeros((gout.shape[0], gout.shape[1], ih, iw), dtype=gout.dtype)
    if gout.dtype == np.float32:
        _bilin_bwd[float](gout, gx, y0, y1, fy, x0, x1, fx)
    else:
        _bilin_bwd[double](gout, gx, y0, y1, fy, x0, x1, fx)
    return gx
