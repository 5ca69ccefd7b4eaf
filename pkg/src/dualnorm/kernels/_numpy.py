"""Pure-numpy fallback kernels: strided-view gather, slice-loop scatter."""

import numpy as np


def im2col(x, kh, kw, stride, pad):
    """Unfold [N,C,H,W] into patch columns [N, C*kh*kw, Ho*Wo]."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, ho * wo)


def col2im(dcols, x_shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add patch columns back onto [N,C,H,W].

    Overlapping patches accumulate, so this cannot be a strided view; instead
    we loop over the kh*kw kernel offsets (a handful) and add whole slices.
    """
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        ye = i + stride * ho
        for j in range(kw):
            xe = j + stride * wo
            dxp[:, :, i:ye:stride, j:xe:stride] += d6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp
