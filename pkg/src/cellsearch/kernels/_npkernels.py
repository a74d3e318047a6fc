"""Pure-numpy convolution and pooling kernels.

Fallback implementation of the kernel contract in ``cellsearch.kernels``.
Dense (``groups == 1``) convolutions run as patch-matrix contractions on
BLAS; depthwise convolutions and pooling unroll the small window into a
handful of strided-slice passes, which beats materializing patch tensors at
the feature-map sizes this package works with.

All arrays are C-contiguous float64 in (batch, channel, time, freq) layout.
"""

import numpy as np

BACKEND_NAME = "numpy"


def out_dim(size, k, stride, pad, dilation):
    """Output extent of a conv/pool dimension (floor convention)."""
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _patches(xp, kh, kw, sh, sw, dh, dw, oh, ow):
    """Read-only (n, c, kh, kw, oh, ow) window view into a padded array."""
    n, c = xp.shape[:2]
    sn, sc, srow, scol = xp.strides
    shape = (n, c, kh, kw, oh, ow)
    strides = (sn, sc, srow * dh, scol * dw, srow * sh, scol * sw)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _window(arr, i, j, sh, sw, dh, dw, oh, ow):
    """Strided (n, c, oh, ow) slice of a padded array at window offset (i, j)."""
    return arr[:, :, i * dh : i * dh + (oh - 1) * sh + 1 : sh, j * dw : j * dw + (ow - 1) * sw + 1 : sw]


def _check_out(oh, ow, what, detail):
    if oh < 1 or ow < 1:
        raise ValueError(f"{what} output would be empty: {detail}")


def conv2d_forward(x, w, stride, padding, dilation, groups):
    n, c_in, h, wid = x.shape
    c_out, c_in_g, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    oh = out_dim(h, kh, sh, ph, dh)
    ow = out_dim(wid, kw, sw, pw, dw)
    _check_out(
        oh,
        ow,
        "conv",
        f"input {h}x{wid}, kernel {kh}x{kw}, stride {sh}x{sw}, padding {ph}x{pw}, dilation {dh}x{dw}",
    )

    if kh == 1 and kw == 1 and ph == 0 and pw == 0 and groups == 1:
        # pointwise: one batched matrix product over positions, no copies
        xs = x[:, :, ::sh, ::sw] if (sh > 1 or sw > 1) else x
        xs = np.ascontiguousarray(xs)
        y = np.matmul(w[:, :, 0, 0], xs.reshape(n, c_in, oh * ow))
        return y.reshape(n, c_out, oh, ow)

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x

    if groups == c_in and c_in_g == 1 and c_out == c_in:
        # depthwise: accumulate the kh*kw strided slices
        y = np.zeros((n, c_out, oh, ow))
        for i in range(kh):
            for j in range(kw):
                y += _window(xp, i, j, sh, sw, dh, dw, oh, ow) * w[None, :, 0, i, j, None, None]
        return y

    pat = _patches(xp, kh, kw, sh, sw, dh, dw, oh, ow)
    if groups == 1:
        cols = pat.reshape(n, c_in * kh * kw, oh * ow)  # copies the patch view once
        y = np.matmul(w.reshape(c_out, c_in * kh * kw), cols)
        return y.reshape(n, c_out, oh, ow)
    # general grouped convolution
    cg_out = c_out // groups
    y = np.empty((n, c_out, oh, ow))
    for g in range(groups):
        pg = pat[:, g * c_in_g : (g + 1) * c_in_g].reshape(n, c_in_g * kh * kw, oh * ow)
        wg = w[g * cg_out : (g + 1) * cg_out].reshape(cg_out, c_in_g * kh * kw)
        y[:, g * cg_out : (g + 1) * cg_out] = np.matmul(wg, pg).reshape(n, cg_out, oh, ow)
    return y


def _scatter_windows(gcols, x_shape, ksize, stride, padding, dilation):
    """Accumulate per-window gradients (n, c, kh, kw, oh, ow) back to input."""
    n, c, h, wid = x_shape
    kh, kw = ksize
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    oh, ow = gcols.shape[4], gcols.shape[5]
    gxp = np.zeros((n, c, h + 2 * ph, wid + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            _window(gxp, i, j, sh, sw, dh, dw, oh, ow)[...] += gcols[:, :, i, j]
    return np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + wid]) if (ph or pw) else gxp


def conv2d_backward_input(gy, w, x_shape, stride, padding, dilation, groups):
    n, c_in, h, wid = x_shape
    c_out, c_in_g, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    oh, ow = gy.shape[2], gy.shape[3]

    if kh == 1 and kw == 1 and ph == 0 and pw == 0 and groups == 1 and sh == 1 and sw == 1:
        gx = np.matmul(w[:, :, 0, 0].T.copy(), np.ascontiguousarray(gy).reshape(n, c_out, oh * ow))
        return gx.reshape(n, c_in, h, wid)

    if groups == c_in and c_in_g == 1 and c_out == c_in:
        gxp = np.zeros((n, c_in, h + 2 * ph, wid + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                _window(gxp, i, j, sh, sw, dh, dw, oh, ow)[...] += gy * w[None, :, 0, i, j, None, None]
        return np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + wid]) if (ph or pw) else gxp

    if groups == 1:
        gcols = np.matmul(w.reshape(c_out, -1).T.copy(), np.ascontiguousarray(gy).reshape(n, c_out, oh * ow))
        gcols = gcols.reshape(n, c_in, kh, kw, oh, ow)
    else:
        cg_out = c_out // groups
        gcols = np.empty((n, c_in, kh, kw, oh, ow))
        for g in range(groups):
            wg = w[g * cg_out : (g + 1) * cg_out].reshape(cg_out, -1).T.copy()
            gyg = np.ascontiguousarray(gy[:, g * cg_out : (g + 1) * cg_out]).reshape(n, cg_out, oh * ow)
            gcols[:, g * c_in_g : (g + 1) * c_in_g] = np.matmul(wg, gyg).reshape(n, c_in_g, kh, kw, oh, ow)
    return _scatter_windows(gcols, x_shape, (kh, kw), stride, padding, dilation)


def conv2d_backward_weight(gy, x, w_shape, stride, padding, dilation, groups):
    n, c_in, h, wid = x.shape
    c_out, c_in_g, kh, kw = w_shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    oh, ow = gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x

    if groups == c_in and c_in_g == 1 and c_out == c_in:
        gw = np.empty(w_shape)
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = (gy * _window(xp, i, j, sh, sw, dh, dw, oh, ow)).sum(axis=(0, 2, 3))
        return gw

    gy3 = np.ascontiguousarray(gy).reshape(n, c_out, oh * ow)
    pat = _patches(xp, kh, kw, sh, sw, dh, dw, oh, ow)
    if groups == 1:
        cols = pat.reshape(n, c_in * kh * kw, oh * ow)
        gw = np.matmul(gy3, cols.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(w_shape)
    cg_out = c_out // groups
    gw = np.empty(w_shape)
    for g in range(groups):
        gyg = gy3[:, g * cg_out : (g + 1) * cg_out]
        pg = pat[:, g * c_in_g : (g + 1) * c_in_g].reshape(n, c_in_g * kh * kw, oh * ow)
        gw[g * cg_out : (g + 1) * cg_out] = np.matmul(gyg, pg.transpose(0, 2, 1)).sum(axis=0).reshape(
            cg_out, c_in_g, kh, kw
        )
    return gw


def _pool_geometry(x_shape, ksize, stride, padding):
    n, c, h, wid = x_shape
    kh, kw = ksize
    sh, sw = stride
    ph, pw = padding
    oh = out_dim(h, kh, sh, ph, 1)
    ow = out_dim(wid, kw, sw, pw, 1)
    _check_out(oh, ow, "pool", f"input {h}x{wid} window {kh}x{kw} stride {sh}x{sw} padding {ph}x{pw}")
    return n, c, h, wid, kh, kw, sh, sw, ph, pw, oh, ow


def maxpool2d_forward(x, ksize, stride, padding):
    """Max pooling; padded positions never win (pad value is -inf).

    Returns (y, argmax) where argmax holds the flat in-window offset of the
    selected element, first-wins on ties.
    """
    n, c, h, wid, kh, kw, sh, sw, ph, pw, oh, ow = _pool_geometry(x.shape, ksize, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if (ph or pw) else x
    best = np.full((n, c, oh, ow), -np.inf)
    besti = np.zeros((n, c, oh, ow), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            sl = _window(xp, i, j, sh, sw, 1, 1, oh, ow)
            mask = sl > best
            np.copyto(best, sl, where=mask)
            besti[mask] = i * kw + j
    return best, besti


def maxpool2d_backward(gy, argmax, x_shape, ksize, stride, padding):
    n, c, h, wid = x_shape
    kh, kw = ksize
    sh, sw = stride
    ph, pw = padding
    oh, ow = gy.shape[2], gy.shape[3]
    gxp = np.zeros((n, c, h + 2 * ph, wid + 2 * pw))
    for widx in range(kh * kw):
        contrib = np.where(argmax == widx, gy, 0.0)
        _window(gxp, widx // kw, widx % kw, sh, sw, 1, 1, oh, ow)[...] += contrib
    return np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + wid]) if (ph or pw) else gxp


def _pool_counts(h, wid, ksize, stride, padding, oh, ow):
    """In-bounds element count per output window (for pad-excluded averages)."""
    kh, kw = ksize
    sh, sw = stride
    ph, pw = padding
    op = np.zeros((1, 1, h + 2 * ph, wid + 2 * pw))
    op[:, :, ph : ph + h, pw : pw + wid] = 1.0
    counts = np.zeros((oh, ow))
    for i in range(kh):
        for j in range(kw):
            counts += _window(op, i, j, sh, sw, 1, 1, oh, ow)[0, 0]
    return counts


def avgpool2d_forward(x, ksize, stride, padding):
    """Average pooling over the in-bounds window (padded zeros excluded)."""
    n, c, h, wid, kh, kw, sh, sw, ph, pw, oh, ow = _pool_geometry(x.shape, ksize, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    sums = np.zeros((n, c, oh, ow))
    for i in range(kh):
        for j in range(kw):
            sums += _window(xp, i, j, sh, sw, 1, 1, oh, ow)
    return sums / _pool_counts(h, wid, ksize, stride, (ph, pw), oh, ow)


def avgpool2d_backward(gy, x_shape, ksize, stride, padding):
    n, c, h, wid, kh, kw, sh, sw, ph, pw, oh, ow = _pool_geometry(x_shape, ksize, stride, padding)
    g = gy / _pool_counts(h, wid, ksize, stride, (ph, pw), oh, ow)
    gxp = np.zeros((n, c, h + 2 * ph, wid + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            _window(gxp, i, j, sh, sw, 1, 1, oh, ow)[...] += g
    return np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + wid]) if (ph or pw) else gxp
