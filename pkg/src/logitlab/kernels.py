"""Hot numeric kernels: conv2d and maxpool2d forward/backward.

Two interchangeable backends compute identical results:

* ``numba`` (default): gather/scatter loops compiled with ``@njit``,
  matrix products delegated to BLAS.
* ``numpy``: stride-trick gathers and slice-wise scatters, no compilation.

Select with ``LOGITLAB_BACKEND=numba|numpy``.  Layout is NCHW throughout.
The im2col matrix is stored transposed, ``[C*KH*KW, B*OH*OW]``, so the
gather/scatter loops stream contiguously along the output-pixel axis and
the weight matrix is just ``w.reshape(F, -1)``.
"""

import os

import numpy as np

_REQUESTED = os.environ.get("LOGITLAB_BACKEND", "numba").lower()
if _REQUESTED not in ("numba", "numpy"):
    raise ValueError(f"LOGITLAB_BACKEND must be 'numba' or 'numpy', got {_REQUESTED!r}")

if _REQUESTED == "numba":
    try:
        from numba import njit
        BACKEND = "numba"
    except ImportError:
        BACKEND = "numpy"
else:
    BACKEND = "numpy"


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


class DimensionError(ValueError):
    """Incompatible shapes fed to a kernel."""


if BACKEND == "numba":

    @njit(fastmath=True, cache=True)
    def _im2col_nb(xp, kh, kw, stride, oh, ow):  # pragma: no cover - jitted
        b, c, hp, wp = xp.shape
        colsT = np.empty((c * kh * kw, b * oh * ow), dtype=xp.dtype)
        for ci in range(c):
            for u in range(kh):
                for v in range(kw):
                    k = (ci * kh + u) * kw + v
                    for bi in range(b):
                        for i in range(oh):
                            iu = i * stride + u
                            row0 = (bi * oh + i) * ow
                            for j in range(ow):
                                colsT[k, row0 + j] = xp[bi, ci, iu, j * stride + v]
        return colsT

    @njit(fastmath=True, cache=True)
    def _col2im_nb(dcolsT, gx, kh, kw, stride, pad, oh, ow):  # pragma: no cover
        b, c, h, w = gx.shape
        for bi in range(b):
            for ci in range(c):
                for u in range(kh):
                    for v in range(kw):
                        k = (ci * kh + u) * kw + v
                        for i in range(oh):
                            ih = i * stride + u - pad
                            if ih < 0 or ih >= h:
                                continue
                            row0 = (bi * oh + i) * ow
                            for j in range(ow):
                                iw = j * stride + v - pad
                                if 0 <= iw < w:
                                    gx[bi, ci, ih, iw] += dcolsT[k, row0 + j]

    @njit(fastmath=True, cache=True)
    def _pool_fwd_nb(x, size):  # pragma: no cover - jitted
        b, c, h, w = x.shape
        oh, ow = h // size, w // size
        y = np.empty((b, c, oh, ow), dtype=x.dtype)
        idx = np.empty((b, c, oh, ow), dtype=np.int8)
        for bi in range(b):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        best = x[bi, ci, i * size, j * size]
                        arg = 0
                        for u in range(size):
                            for v in range(size):
                                val = x[bi, ci, i * size + u, j * size + v]
                                if val > best:
                                    best = val
                                    arg = u * size + v
                        y[bi, ci, i, j] = best
                        idx[bi, ci, i, j] = arg
        return y, idx

    @njit(fastmath=True, cache=True)
    def _pool_bwd_nb(gy, idx, size, h, w):  # pragma: no cover - jitted
        b, c, oh, ow = gy.shape
        dx = np.zeros((b, c, h, w), dtype=gy.dtype)
        for bi in range(b):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        arg = idx[bi, ci, i, j]
                        dx[bi, ci, i * size + arg // size,
                           j * size + arg % size] = gy[bi, ci, i, j]
        return dx

    def _im2col(xp, kh, kw, stride, oh, ow):
        return _im2col_nb(xp, kh, kw, stride, oh, ow)

    def _col2im(dcolsT, x_shape, dtype, kh, kw, stride, pad, oh, ow):
        gx = np.zeros(x_shape, dtype=dtype)
        _col2im_nb(np.ascontiguousarray(dcolsT), gx, kh, kw, stride, pad, oh, ow)
        return gx

    def maxpool2d_forward(x, size):
        """Non-overlapping max pool; ties go to the first element per window."""
        _check_pool(x, size)
        return _pool_fwd_nb(np.ascontiguousarray(x), size)

    def maxpool2d_backward(gy, idx, x_shape, size):
        return _pool_bwd_nb(np.ascontiguousarray(gy), idx,
                            size, x_shape[2], x_shape[3])

else:

    def _im2col(xp, kh, kw, stride, oh, ow):
        b, c = xp.shape[0], xp.shape[1]
        s0, s1, s2, s3 = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp, (c, kh, kw, b, oh, ow),
            (s1, s2, s3, s0, s2 * stride, s3 * stride))
        return np.ascontiguousarray(view).reshape(c * kh * kw, b * oh * ow)

    def _col2im(dcolsT, x_shape, dtype, kh, kw, stride, pad, oh, ow):
        b, c, h, w = x_shape
        dxp = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=dtype)
        d6 = dcolsT.reshape(c, kh, kw, b, oh, ow)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u:u + oh * stride:stride, v:v + ow * stride:stride] \
                    += d6[:, u, v]
        core = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return np.ascontiguousarray(core.transpose(1, 0, 2, 3))

    def maxpool2d_forward(x, size):
        """Non-overlapping max pool; ties go to the first element per window."""
        _check_pool(x, size)
        b, c, h, w = x.shape
        oh, ow = h // size, w // size
        x6 = x.reshape(b, c, oh, size, ow, size)
        # two-stage argmax keeps the copies contiguous; combined index is
        # row-major within the window so ties resolve to the first element
        inner = x6.argmax(axis=5)
        m5 = np.take_along_axis(x6, inner[..., None], axis=5)[..., 0]
        outer = m5.argmax(axis=3)
        y = np.take_along_axis(m5, outer[..., None, :], axis=3)[..., 0, :]
        inner_at = np.take_along_axis(
            inner, outer[..., None, :], axis=3)[..., 0, :]
        idx = (outer * size + inner_at).astype(np.int8)
        return y, idx

    def maxpool2d_backward(gy, idx, x_shape, size):
        b, c, h, w = x_shape
        oh, ow = h // size, w // size
        dx6 = np.zeros((b, c, oh, size, ow, size), dtype=gy.dtype)
        outer = (idx // size).astype(np.int64)
        inner = (idx % size).astype(np.int64)
        bi, ci, ii, ji = np.ogrid[:b, :c, :oh, :ow]
        dx6[bi, ci, ii, outer, ji, inner] = gy
        return dx6.reshape(b, c, h, w)


def _check_pool(x, size):
    if x.shape[2] % size or x.shape[3] % size:
        raise DimensionError(
            f"maxpool window {size} does not divide spatial dims of {x.shape}")


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _check_conv_shapes(x, w, stride, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernels, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernels {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
        raise DimensionError(
            f"kernel {w.shape} larger than padded input {x.shape} (pad={pad})")


def conv2d_forward(x, w, stride=1, pad=0):
    """Cross-correlation of NCHW ``x`` with FCKK ``w``.

    Returns the output and the transposed im2col matrix (reused by the
    weight gradient when parameters require one).
    """
    _check_conv_shapes(x, w, stride, pad)
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(wd, kw, stride, pad)
    colsT = _im2col(_pad(x, pad), kh, kw, stride, oh, ow)
    # y computed transposed so the NCHW reshape copies contiguous runs
    yt = w.reshape(f, -1) @ colsT  # [F, B*OH*OW]
    y = np.ascontiguousarray(
        yt.reshape(f, b, oh, ow).transpose(1, 0, 2, 3))
    return y, colsT


def conv2d_backward(x, w, gy, stride, pad, need_input, need_weights, colsT=None):
    """Gradients of conv2d w.r.t. input and/or kernels."""
    b = x.shape[0]
    f, _, kh, kw = w.shape
    oh, ow = gy.shape[2], gy.shape[3]
    gyt = np.ascontiguousarray(
        gy.transpose(1, 0, 2, 3)).reshape(f, b * oh * ow)
    gx = gw = None
    if need_input:
        dcolsT = w.reshape(f, -1).T @ gyt  # [C*KH*KW, B*OH*OW]
        gx = _col2im(dcolsT, x.shape, x.dtype, kh, kw, stride, pad, oh, ow)
    if need_weights:
        if colsT is None:
            colsT = _im2col(_pad(x, pad), kh, kw, stride, oh, ow)
        gw = (gyt @ colsT.T).reshape(f, x.shape[1], kh, kw)
    return gx, gw
