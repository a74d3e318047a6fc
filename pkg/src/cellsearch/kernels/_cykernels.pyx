# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Direct-loop implementations of the kernel contract in ``cellsearch.kernels``.
The grouped/depthwise convolutions and the pooling ops walk flat row
pointers with precomputed valid window ranges, which is where a compiled
loop beats building patch matrices; dense convolutions keep a generic
(unblocked) loop nest and are expected to lose to the BLAS path of the
numpy backend.

Every output element is produced by exactly one thread with a fixed inner
summation order, so results are bitwise identical for any thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel import prange

cnp.import_array()

BACKEND_NAME = "compiled"


def out_dim(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t j, Py_ssize_t dil, Py_ssize_t stride) nogil:
    # smallest output index whose input column j*dil - pad is in bounds
    cdef Py_ssize_t d = pad - j * dil
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t limit, Py_ssize_t pad, Py_ssize_t j, Py_ssize_t dil,
                           Py_ssize_t stride, Py_ssize_t omax) nogil:
    # largest output index (inclusive) whose input column stays below limit
    cdef Py_ssize_t e = limit - 1 + pad - j * dil
    if e < 0:
        return -1
    e = e // stride
    if e < omax:
        return e
    return omax


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, stride, padding, dilation, int groups):
    cdef Py_ssize_t n = x.shape[0], c_in = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], c_in_g = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = padding[0], pw = padding[1]
    cdef Py_ssize_t dh = dilation[0], dw = dilation[1]
    cdef Py_ssize_t oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    cdef Py_ssize_t ow = (wid + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv output would be empty: input {h}x{wid}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, padding {ph}x{pw}, dilation {dh}x{dw}"
        )
    cdef bint depthwise = groups == c_in and c_in_g == 1 and c_out == c_in
    y = np.zeros((n, c_out, oh, ow))
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t cg_out = c_out // groups
    cdef Py_ssize_t t, b, co, g, ci0, ci, i, j, oi, oj, ih, iw, lo, hi, xoff
    cdef double acc, wv
    cdef double* px
    cdef double* py
    cdef double* pw_

    if depthwise:
        for t in prange(n * c_in, nogil=True, schedule='static'):
            b = t // c_in
            ci = t % c_in
            px = &x[b, ci, 0, 0]
            py = &yv[b, ci, 0, 0]
            pw_ = &w[ci, 0, 0, 0]
            for oi in range(oh):
                for i in range(kh):
                    ih = oi * sh - ph + i * dh
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        wv = pw_[i * kw + j]
                        lo = _lo(pw, j, dw, sw)
                        hi = _hi(wid, pw, j, dw, sw, ow - 1)
                        xoff = ih * wid - pw + j * dw
                        for oj in range(lo, hi + 1):
                            py[oi * ow + oj] += wv * px[oj * sw + xoff]
        return y

    for t in prange(n * c_out, nogil=True, schedule='static'):
        b = t // c_out
        co = t % c_out
        g = co // cg_out
        ci0 = g * c_in_g
        py = &yv[b, co, 0, 0]
        for ci in range(c_in_g):
            px = &x[b, ci0 + ci, 0, 0]
            pw_ = &w[co, ci, 0, 0]
            for oi in range(oh):
                for i in range(kh):
                    ih = oi * sh - ph + i * dh
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        wv = pw_[i * kw + j]
                        lo = _lo(pw, j, dw, sw)
                        hi = _hi(wid, pw, j, dw, sw, ow - 1)
                        xoff = ih * wid - pw + j * dw
                        for oj in range(lo, hi + 1):
                            py[oi * ow + oj] += wv * px[oj * sw + xoff]
    return y


def conv2d_backward_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w, x_shape, stride, padding, dilation, int groups):
    cdef Py_ssize_t n = x_shape[0], c_in = x_shape[1], h = x_shape[2], wid = x_shape[3]
    cdef Py_ssize_t c_out = w.shape[0], c_in_g = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = padding[0], pw = padding[1]
    cdef Py_ssize_t dh = dilation[0], dw = dilation[1]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef bint depthwise = groups == c_in and c_in_g == 1 and c_out == c_in
    gx = np.zeros((n, c_in, h, wid))
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t cg_out = c_out // groups
    cdef Py_ssize_t t, b, ci, g, co, oi, oj, i, j, ih, lo, hi, xoff
    cdef double wv, gv
    cdef double* pgx
    cdef double* pgy
    cdef double* pw_

    if depthwise:
        for t in prange(n * c_in, nogil=True, schedule='static'):
            b = t // c_in
            ci = t % c_in
            pgx = &gxv[b, ci, 0, 0]
            pgy = &gy[b, ci, 0, 0]
            pw_ = &w[ci, 0, 0, 0]
            for oi in range(oh):
                for i in range(kh):
                    ih = oi * sh - ph + i * dh
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        wv = pw_[i * kw + j]
                        lo = _lo(pw, j, dw, sw)
                        hi = _hi(wid, pw, j, dw, sw, ow - 1)
                        xoff = ih * wid - pw + j * dw
                        for oj in range(lo, hi + 1):
                            pgx[oj * sw + xoff] += wv * pgy[oi * ow + oj]
        return gx

    for t in prange(n * c_in, nogil=True, schedule='static'):
        b = t // c_in
        ci = t % c_in
        g = ci // c_in_g
        pgx = &gxv[b, ci, 0, 0]
        for co in range(g * cg_out, (g + 1) * cg_out):
            pgy = &gy[b, co, 0, 0]
            pw_ = &w[co, ci % c_in_g, 0, 0]
            for oi in range(oh):
                for i in range(kh):
                    ih = oi * sh - ph + i * dh
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        wv = pw_[i * kw + j]
                        lo = _lo(pw, j, dw, sw)
                        hi = _hi(wid, pw, j, dw, sw, ow - 1)
                        xoff = ih * wid - pw + j * dw
                        for oj in range(lo, hi + 1):
                            pgx[oj * sw + xoff] += wv * pgy[oi * ow + oj]
    return gx


def conv2d_backward_weight(double[:, :, :, ::1] gy, double[:, :, :, ::1] x, w_shape, stride, padding, dilation, int groups):
    cdef Py_ssize_t n = x.shape[0], c_in = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t c_out = w_shape[0], c_in_g = w_shape[1], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = padding[0], pw = padding[1]
    cdef Py_ssize_t dh = dilation[0], dw = dilation[1]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    gw = np.zeros((c_out, c_in_g, kh, kw))
    cdef double[:, :, :, ::1] gwv = gw
    cdef Py_ssize_t cg_out = c_out // groups
    cdef Py_ssize_t co, g, ci0, ci, i, j, b, oi, oj, ih, lo, hi, xoff
    cdef double acc
    cdef double* px
    cdef double* pgy

    for co in prange(c_out, nogil=True, schedule='static'):
        g = co // cg_out
        ci0 = g * c_in_g
        for ci in range(c_in_g):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    lo = _lo(pw, j, dw, sw)
                    hi = _hi(wid, pw, j, dw, sw, ow - 1)
                    for b in range(n):
                        px = &x[b, ci0 + ci, 0, 0]
                        pgy = &gy[b, co, 0, 0]
                        for oi in range(oh):
                            ih = oi * sh - ph + i * dh
                            if ih < 0 or ih >= h:
                                continue
                            xoff = ih * wid - pw + j * dw
                            for oj in range(lo, hi + 1):
                                acc = acc + pgy[oi * ow + oj] * px[oj * sw + xoff]
                    gwv[co, ci, i, j] = acc
    return gw


def maxpool2d_forward(double[:, :, :, ::1] x, ksize, stride, padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t kh = ksize[0], kw = ksize[1]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = padding[0], pw = padding[1]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (wid + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"pool output would be empty: input {h}x{wid} window {kh}x{kw} "
            f"stride {sh}x{sw} padding {ph}x{pw}"
        )
    y = np.empty((n, c, oh, ow))
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] yv = y
    cdef long long[:, :, :, ::1] iv = idx
    cdef Py_ssize_t t, b, ch, oi, oj, i, j, ih, iw
    cdef double best, v
    cdef Py_ssize_t besti
    cdef double* px

    for t in prange(n * c, nogil=True, schedule='static'):
        b = t // c
        ch = t % c
        px = &x[b, ch, 0, 0]
        for oi in range(oh):
            for oj in range(ow):
                best = -1e308
                besti = -1
                for i in range(kh):
                    ih = oi * sh - ph + i
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        iw = oj * sw - pw + j
                        if iw < 0 or iw >= wid:
                            continue
                        v = px[ih * wid + iw]
                        if besti < 0 or v > best:
                            best = v
                            besti = i * kw + j
                yv[b, ch, oi, oj] = best
                iv[b, ch, oi, oj] = besti
    return y, idx


def maxpool2d_backward(double[:, :, :, ::1] gy, long long[:, :, :, ::1] argmax, x_shape, ksize, stride, padding):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], wid = x_shape[3]
    cdef Py_ssize_t kh = ksize[0], kw = ksize[1]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = padding[0], pw = padding[1]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    gx = np.zeros((n, c, h, wid))
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t t, b, ch, oi, oj, widx, ih, iw

    for t in prange(n * c, nogil=True, schedule='static'):
        b = t // c
        ch = t % c
        for oi in range(oh):
            for oj in range(ow):
                widx = argmax[b, ch, oi, oj]
                ih = oi * sh - ph + widx // kw
                iw = oj * sw - pw + widx % kw
                gxv[b, ch, ih, iw] += gy[b, ch, oi, oj]
    return gx


def avgpool2d_forward(double[:, :, :, ::1] x, ksize, stride, padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t kh = ksize[0], kw = ksize[1]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = padding[0], pw = padding[1]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (wid + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"pool output would be empty: input {h}x{wid} window {kh}x{kw} "
            f"stride {sh}x{sw} padding {ph}x{pw}"
        )
    y = np.empty((n, c, oh, ow))
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t t, b, ch, oi, oj, i, j, ih, iw, cnt
    cdef double acc
    cdef double* px

    for t in prange(n * c, nogil=True, schedule='static'):
        b = t // c
        ch = t % c
        px = &x[b, ch, 0, 0]
        for oi in range(oh):
            for oj in range(ow):
                acc = 0.0
                cnt = 0
                for i in range(kh):
                    ih = oi * sh - ph + i
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        iw = oj * sw - pw + j
                        if iw < 0 or iw >= wid:
                            continue
                        acc = acc + px[ih * wid + iw]
                        cnt = cnt + 1
                yv[b, ch, oi, oj] = acc / cnt
    return y


def avgpool2d_backward(double[:, :, :, ::1] gy, x_shape, ksize, stride, padding):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], wid = x_shape[3]
    cdef Py_ssize_t kh = ksize[0], kw = ksize[1]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = padding[0], pw = padding[1]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    gx = np.zeros((n, c, h, wid))
    cdef double[:, :, :, ::1] gxv = gx
    cdef Py_ssize_t t, b, ch, oi, oj, i, j, ih, iw, cnt
    cdef double g
    cdef double* pgx

    for t in prange(n * c, nogil=True, schedule='static'):
        b = t // c
        ch = t % c
        pgx = &gxv[b, ch, 0, 0]
        for oi in range(oh):
            for oj in range(ow):
                cnt = 0
                for i in range(kh):
                    ih = oi * sh - ph + i
                    if 0 <= ih < h:
                        for j in range(kw):
                            iw = oj * sw - pw + j
                            if 0 <= iw < wid:
                                cnt = cnt + 1
                g = gy[b, ch, oi, oj] / cnt
                for i in range(kh):
                    ih = oi * sh - ph + i
                    if ih < 0 or ih >= h:
                        continue
                    for j in range(kw):
                        iw = oj * sw - pw + j
                        if iw < 0 or iw >= wid:
                            continue
                        pgx[ih * wid + iw] += g
    return gx
