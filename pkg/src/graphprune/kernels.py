"""Hot loops of the tensor engine: im2col/col2im and spatial pooling.

Every kernel exists twice: a numba version (``nb_*``) and a numpy version
(``np_*``).  The public names bind to one of them according to
``graphprune._jit.USE_NUMBA``.  Both produce identical results up to
floating-point summation order in ``col2im``.

Feature maps are NCHW.  ``im2col`` returns ``(C*k*k, N*OH*OW)``: rows are
ordered channel-major, then kernel row, then kernel column, matching
``weight.reshape(O, C*k*k)``; columns are sample-major.  One GEMM per
convolution then covers the whole batch.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import USE_NUMBA, njit


def out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# -- numpy ------------------------------------------------------------------

def np_im2col(x, k, s, p):
    n, c, h, w = x.shape
    oh, ow = out_size(h, k, s, p), out_size(w, k, s, p)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    # (n, c, oh, ow, k, k) -> (c, k, k, n, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * oh * ow)


def np_col2im(cols, shape, k, s, p):
    n, c, h, w = shape
    oh, ow = out_size(h, k, s, p), out_size(w, k, s, p)
    cols = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * oh:s, j:j + s * ow:s] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out[:, :, p:p + h, p:p + w]


def np_maxpool_forward(x, k, s, p):
    n, c, h, w = x.shape
    oh, ow = out_size(h, k, s, p), out_size(w, k, s, p)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    win = win.reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def np_maxpool_backward(dout, arg, shape, k, s, p):
    n, c, h, w = shape
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(hit, dout, 0)
    return dx[:, :, p:p + h, p:p + w]


def np_avgpool_forward(x, k, s, p):
    # zero padding counted in the divisor
    n, c, h, w = x.shape
    oh, ow = out_size(h, k, s, p), out_size(w, k, s, p)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += x[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return out / (k * k)


def np_avgpool_backward(dout, shape, k, s, p):
    n, c, h, w = shape
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
    g = dout / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += g
    return dx[:, :, p:p + h, p:p + w]


# -- numba ------------------------------------------------------------------

@njit(cache=True)
def nb_im2col(x, k, s, p):
    n, c, h, w = x.shape
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    cols = np.zeros((c * k * k, n * oh * ow), dtype=x.dtype)
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                row = (ch * k + i) * k + j
                for b in range(n):
                    base = b * oh * ow
                    for y in range(oh):
                        iy = y * s + i - p
                        if iy < 0 or iy >= h:
                            continue
                        for z in range(ow):
                            ix = z * s + j - p
                            if 0 <= ix < w:
                                cols[row, base + y * ow + z] = x[b, ch, iy, ix]
    return cols


@njit(cache=True)
def _nb_col2im(cols, n, c, h, w, k, s, p):
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                row = (ch * k + i) * k + j
                for b in range(n):
                    base = b * oh * ow
                    for y in range(oh):
                        iy = y * s + i - p
                        if iy < 0 or iy >= h:
                            continue
                        for z in range(ow):
                            ix = z * s + j - p
                            if 0 <= ix < w:
                                out[b, ch, iy, ix] += cols[row, base + y * ow + z]
    return out


def nb_col2im(cols, shape, k, s, p):
    n, c, h, w = shape
    return _nb_col2im(np.ascontiguousarray(cols), n, c, h, w, k, s, p)


@njit(cache=True)
def nb_maxpool_forward(x, k, s, p):
    n, c, h, w = x.shape
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for z in range(ow):
                    best = -np.inf
                    bi = 0
                    for i in range(k):
                        iy = y * s + i - p
                        for j in range(k):
                            ix = z * s + j - p
                            if 0 <= iy < h and 0 <= ix < w:
                                v = x[b, ch, iy, ix]
                            else:
                                v = -np.inf
                            # strict comparison keeps the first maximum, like argmax
                            if v > best or (i == 0 and j == 0):
                                best = v
                                bi = i * k + j
                    out[b, ch, y, z] = best
                    arg[b, ch, y, z] = bi
    return out, arg


@njit(cache=True)
def _nb_maxpool_backward(dout, arg, n, c, h, w, k, s, p):
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    oh, ow = dout.shape[2], dout.shape[3]
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for z in range(ow):
                    a = arg[b, ch, y, z]
                    iy = y * s + a // k - p
                    ix = z * s + a % k - p
                    if 0 <= iy < h and 0 <= ix < w:
                        dx[b, ch, iy, ix] += dout[b, ch, y, z]
    return dx


def nb_maxpool_backward(dout, arg, shape, k, s, p):
    n, c, h, w = shape
    return _nb_maxpool_backward(np.ascontiguousarray(dout), arg, n, c, h, w, k, s, p)


@njit(cache=True)
def _nb_avgpool_forward(xp, oh, ow, k, s):
    # xp is zero-padded; separable: row sums first, then column sums
    n, c, hp, wp = xp.shape
    rows = np.zeros((hp, ow), dtype=xp.dtype)
    out = np.empty((n, c, oh, ow), dtype=xp.dtype)
    inv = xp.dtype.type(1.0 / (k * k))
    for b in range(n):
        for ch in range(c):
            for iy in range(hp):
                for z in range(ow):
                    acc = xp[b, ch, iy, z * s]
                    for j in range(1, k):
                        acc += xp[b, ch, iy, z * s + j]
                    rows[iy, z] = acc
            for y in range(oh):
                for z in range(ow):
                    acc = rows[y * s, z]
                    for i in range(1, k):
                        acc += rows[y * s + i, z]
                    out[b, ch, y, z] = acc * inv
    return out


def nb_avgpool_forward(x, k, s, p):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)
    return _nb_avgpool_forward(xp, out_size(h, k, s, p), out_size(w, k, s, p), k, s)


@njit(cache=True)
def _nb_avgpool_backward(dout, hp, wp, k, s):
    n, c, oh, ow = dout.shape
    dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
    inv = dout.dtype.type(1.0 / (k * k))
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for z in range(ow):
                    g = dout[b, ch, y, z] * inv
                    for i in range(k):
                        for j in range(k):
                            dxp[b, ch, y * s + i, z * s + j] += g
    return dxp


def nb_avgpool_backward(dout, shape, k, s, p):
    n, c, h, w = shape
    dxp = _nb_avgpool_backward(np.ascontiguousarray(dout), h + 2 * p, w + 2 * p, k, s)
    return np.ascontiguousarray(dxp[:, :, p:p + h, p:p + w])


NUMPY = {
    "im2col": np_im2col,
    "col2im": np_col2im,
    "maxpool_forward": np_maxpool_forward,
    "maxpool_backward": np_maxpool_backward,
    "avgpool_forward": np_avgpool_forward,
    "avgpool_backward": np_avgpool_backward,
}
NUMBA = {
    "im2col": nb_im2col,
    "col2im": nb_col2im,
    "maxpool_forward": nb_maxpool_forward,
    "maxpool_backward": nb_maxpool_backward,
    "avgpool_forward": nb_avgpool_forward,
    "avgpool_backward": nb_avgpool_backward,
}

BACKEND = "numba" if USE_NUMBA else "numpy"
_active = NUMBA if USE_NUMBA else NUMPY

im2col = _active["im2col"]
col2im = _active["col2im"]
maxpool_forward = _active["maxpool_forward"]
maxpool_backward = _active["maxpool_backward"]
avgpool_forward = _active["avgpool_forward"]
avgpool_backward = _active["avgpool_backward"]
