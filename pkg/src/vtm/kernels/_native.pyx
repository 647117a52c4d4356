# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv2d kernels (float32/float64).

im2col buffers are packed by tight C loops and the contractions run through
BLAS (sgemm/dgemm), so the heavy lifting matches the reference backend's
GEMM arithmetic while skipping its generalized-window copies. Zero-padding
and strides are handled by hoisted edge bounds in the packing loops.
"""

import numpy as np

cimport cython
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t k, Py_ssize_t pad,
                           Py_ssize_t stride) noexcept:
    # smallest i with i*stride + k - pad >= 0
    if k >= pad:
        return 0
    return (pad - k + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride,
                           Py_ssize_t n, Py_ssize_t n_out) noexcept:
    # one past the largest i with i*stride + k - pad <= n-1
    cdef Py_ssize_t top = n - 1 - k + pad
    if top < 0:
        return 0
    top = top // stride + 1
    return n_out if top > n_out else top


cdef inline void _gemm(char ta, char tb, int m, int n, int k, real* a,
                       int lda, real* b, int ldb, real beta, real* c,
                       int ldc) noexcept:
    cdef real one = <real> 1
    if real is float:
        sgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _im2col(real[:, :, :, ::1] x, Py_ssize_t ib, real[:, ::1] col,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                  Py_ssize_t pad, Py_ssize_t ho, Py_ssize_t wo) noexcept:
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t ic, a, e, i, j, i0, i1, j0, j1, off, krow = 0
    cdef real *dst
    cdef real *src
    for ic in range(c):
        for a in range(kh):
            i0 = _lo(a, pad, stride)
            i1 = _hi(a, pad, stride, h, ho)
            for e in range(kw):
                j0 = _lo(e, pad, stride)
                j1 = _hi(e, pad, stride, wd, wo)
                off = e - pad
                for i in range(ho):
                    dst = &col[krow, i * wo]
                    if i < i0 or i >= i1:
                        for j in range(wo):
                            dst[j] = <real> 0
                        continue
                    src = &x[ib, ic, i * stride + a - pad, 0]
                    for j in range(j0):
                        dst[j] = <real> 0
                    if stride == 1:
                        for j in range(j0, j1):
                            dst[j] = src[j + off]
                    else:
                        for j in range(j0, j1):
                            dst[j] = src[j * stride + off]
                    for j in range(j1, wo):
                        dst[j] = <real> 0
                krow += 1


cdef void _col2im_add(real[:, ::1] col, real[:, :, :, ::1] gx, Py_ssize_t ib,
                      Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                      Py_ssize_t pad, Py_ssize_t ho,
                      Py_ssize_t wo) noexcept:
    cdef Py_ssize_t c = gx.shape[1], h = gx.shape[2], wd = gx.shape[3]
    cdef Py_ssize_t ic, a, e, i, j, i0, i1, j0, j1, off, krow = 0
    cdef real *src
    cdef real *dst
    for ic in range(c):
        for a in range(kh):
            i0 = _lo(a, pad, stride)
            i1 = _hi(a, pad, stride, h, ho)
            for e in range(kw):
                j0 = _lo(e, pad, stride)
                j1 = _hi(e, pad, stride, wd, wo)
                off = e - pad
                for i in range(i0, i1):
                    src = &col[krow, i * wo]
                    dst = &gx[ib, ic, i * stride + a - pad, 0]
                    if stride == 1:
                        for j in range(j0, j1):
                            dst[j + off] += src[j]
                    else:
                        for j in range(j0, j1):
                            dst[j * stride + off] += src[j]
                krow += 1


def conv2d_forward(x, w, int stride=1, int pad=0):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w.astype(x.dtype, copy=False))
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((b, o, ho, wo), dtype=x.dtype)
    col = np.empty((c * kh * kw, ho * wo), dtype=x.dtype)
    if min(b, o, c * kh * kw, ho * wo) > 0:
        if x.dtype == np.float32:
            _fwd[float](x, w, y, col, stride, pad)
        else:
            _fwd[double](x, w, y, col, stride, pad)
    return y


cdef void _fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
               real[:, :, :, ::1] y, real[:, ::1] col, Py_ssize_t stride,
               Py_ssize_t pad) noexcept:
    cdef Py_ssize_t ib, b = x.shape[0]
    cdef int o = <int> y.shape[1], hw = <int> (y.shape[2] * y.shape[3])
    cdef int k = <int> col.shape[0]
    for ib in range(b):
        _im2col(x, ib, col, w.shape[2], w.shape[3], stride, pad,
                y.shape[2], y.shape[3])
        # y_b (O, HoWo) = w (O, K) @ col (K, HoWo), all row-major
        _gemm(c'N', c'N', hw, o, k, &col[0, 0], hw, &w[0, 0, 0, 0], k,
              <real> 0, &y[ib, 0, 0, 0], hw)


def conv2d_backward_input(gy, w, x_shape, int stride=1, int pad=0):
    gy = np.ascontiguousarray(gy)
    w = np.ascontiguousarray(w.astype(gy.dtype, copy=False))
    o, c, kh, kw = w.shape
    gx = np.zeros(x_shape, dtype=gy.dtype)
    gcol = np.empty((c * kh * kw, gy.shape[2] * gy.shape[3]), dtype=gy.dtype)
    if min(gcol.shape[0], gcol.shape[1], o, gx.shape[0]) > 0:
        if gy.dtype == np.float32:
            _bwd_x[float](gy, w, gx, gcol, stride, pad)
        else:
            _bwd_x[double](gy, w, gx, gcol, stride, pad)
    return gx


cdef void _bwd_x(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                 real[:, :, :, ::1] gx, real[:, ::1] gcol,
                 Py_ssize_t stride, Py_ssize_t pad) noexcept:
    cdef Py_ssize_t ib, b = gx.shape[0]
    cdef int o = <int> gy.shape[1], hw = <int> (gy.shape[2] * gy.shape[3])
    cdef int k = <int> gcol.shape[0]
    for ib in range(b):
        # gcol (K, HoWo) = w^T (K, O) @ gy_b (O, HoWo)
        _gemm(c'N', c'T', hw, k, o, &gy[ib, 0, 0, 0], hw, &w[0, 0, 0, 0], k,
              <real> 0, &gcol[0, 0], hw)
        _col2im_add(gcol, gx, ib, w.shape[2], w.shape[3], stride, pad,
                    gy.shape[2], gy.shape[3])


def conv2d_backward_weight(x, gy, w_shape, int stride=1, int pad=0):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy.astype(x.dtype, copy=False))
    o, c, kh, kw = w_shape
    gw = np.zeros(w_shape, dtype=x.dtype)
    col = np.empty((c * kh * kw, gy.shape[2] * gy.shape[3]), dtype=x.dtype)
    if min(col.shape[0], col.shape[1], o, x.shape[0]) > 0:
        if x.dtype == np.float32:
            _bwd_w[float](x, gy, gw, col, stride, pad)
        else:
            _bwd_w[double](x, gy, gw, col, stride, pad)
    return gw


cdef void _bwd_w(real[:, :, :, ::1] x, real[:, :, :, ::1] gy,
                 real[:, :, :, ::1] gw, real[:, ::1] col,
                 Py_ssize_t stride, Py_ssize_t pad) noexcept:
    cdef Py_ssize_t ib, b = x.shape[0]
    cdef int o = <int> gy.shape[1], hw = <int> (gy.shape[2] * gy.shape[3])
    cdef int k = <int> col.shape[0]
    for ib in range(b):
        _im2col(x, ib, col, gw.shape[2], gw.shape[3], stride, pad,
                gy.shape[2], gy.shape[3])
        # gw (O, K) += gy_b (O, HoWo) @ col^T (HoWo, K)
        _gemm(c'T', c'N', k, o, hw, &col[0, 0], hw, &gy[ib, 0, 0, 0], hw,
              <real> 1, &gw[0, 0, 0, 0], k)
