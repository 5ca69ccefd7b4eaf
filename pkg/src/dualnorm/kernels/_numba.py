"""Numba-jit kernels. Parallelized over the batch; deterministic because each
output element is written by exactly one thread."""

import numba as nb
import numpy as np

# cache=True persists the compiled kernels next to this file so repeated
# processes (tests, CLI runs) skip the JIT warm-up.


@nb.njit(parallel=True, fastmath=True, cache=True)
def _im2col(x, cols, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x.shape
    for idx in nb.prange(n):
        for ic in range(c):
            for i in range(kh):
                for j in range(kw):
                    r = (ic * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        inside_y = 0 <= iy < h
                        base = oy * wo
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if inside_y and 0 <= ix < w:
                                cols[idx, r, base + ox] = x[idx, ic, iy, ix]
                            else:
                                cols[idx, r, base + ox] = 0.0


@nb.njit(parallel=True, fastmath=True, cache=True)
def _col2im(dcols, dx, kh, kw, stride, pad, ho, wo):
    n, c, h, w = dx.shape
    for idx in nb.prange(n):
        for ic in range(c):
            for i in range(kh):
                for j in range(kw):
                    r = (ic * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        base = oy * wo
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if 0 <= ix < w:
                                dx[idx, ic, iy, ix] += dcols[idx, r, base + ox]


def im2col(x, kh, kw, stride, pad):
    """Unfold [N,C,H,W] into patch columns [N, C*kh*kw, Ho*Wo]."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
    _im2col(np.ascontiguousarray(x), cols, kh, kw, stride, pad, ho, wo)
    return cols


def col2im(dcols, x_shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add patch columns back onto [N,C,H,W]."""
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    _col2im(np.ascontiguousarray(dcols), dx, kh, kw, stride, pad, ho, wo)
    return dx
