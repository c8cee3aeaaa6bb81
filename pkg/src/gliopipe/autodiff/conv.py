"""3D convolution, transposed convolution, pooling and upsampling.

Tensors are laid out ``[N, C, D, H, W]``. Convolution is
cross-correlation, computed through an explicit im2col buffer so each
call is one matrix product.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _triple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def _out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(xp, k, s, out):
    """xp [N, C, ...] -> cols [C*kd*kh*kw, N*Do*Ho*Wo]."""
    n, c = xp.shape[:2]
    kd, kh, kw = k
    do, ho, wo = out
    cols = np.empty((c, kd, kh, kw, n, do, ho, wo))
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                cols[:, a, b, e] = xp[:, :, a:a + s * do:s, b:b + s * ho:s, e:e + s * wo:s].transpose(1, 0, 2, 3, 4)
    return cols.reshape(c * kd * kh * kw, n * do * ho * wo)


def _col2im(cols, shape, k, s, out):
    """Adjoint of :func:`_im2col`: scatter-add columns back into ``shape``."""
    n, c = shape[:2]
    kd, kh, kw = k
    do, ho, wo = out
    cols = cols.reshape(c, kd, kh, kw, n, do, ho, wo)
    xp = np.zeros(shape)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                xp[:, :, a:a + s * do:s, b:b + s * ho:s, e:e + s * wo:s] += cols[:, a, b, e].transpose(1, 0, 2, 3, 4)
    return xp


def conv3d(x, w, b=None, stride=1, padding=0):
    """x [N,C,D,H,W] (*) w [F,C,kd,kh,kw] + b [F] -> [N,F,D',H',W']."""
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects rank-5 input and weight, got {x.shape} and {w.shape}")
    n, c = x.shape[:2]
    f, cw = w.shape[:2]
    k = w.shape[2:]
    if c != cw:
        raise ValueError(f"conv3d: input channels {c} != weight channels {cw}")
    if b is not None and b.shape != (f,):
        raise ValueError(f"conv3d: bias shape {b.shape} != ({f},)")
    out = tuple(_out_extent(x.shape[2 + i], k[i], stride, padding) for i in range(3))
    if min(out) < 1:
        raise ValueError(f"conv3d: kernel {k} does not fit padded input {x.shape[2:]}")
    p = padding
    xp = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.values
    cols = _im2col(xp, k, stride, out)
    wf = w.values.reshape(f, -1)
    y = (wf @ cols).reshape((f, n) + out).transpose(1, 0, 2, 3, 4)
    if b is not None:
        y = y + b.values[None, :, None, None, None]
    y = np.ascontiguousarray(y)
    xshape, xpshape = x.shape, xp.shape

    def bw(g):
        gf = g.transpose(1, 0, 2, 3, 4).reshape(f, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gf @ cols.T).reshape(w.shape)
        if x.requires_grad:
            gxp = _col2im(wf.T @ gf, xpshape, k, stride, out)
            gx = gxp[:, :, p:p + xshape[2], p:p + xshape[3], p:p + xshape[4]] if p else gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._node(y, parents, bw, "conv3d")


def conv_transpose3d(x, w, stride=1, b=None):
    """Adjoint of an unpadded :func:`conv3d`.

    x [N,F,D,H,W], w [F,C,kd,kh,kw] -> [N,C,(D-1)s+kd, (H-1)s+kh, (W-1)s+kw].
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv_transpose3d expects rank-5 tensors, got {x.shape} and {w.shape}")
    n, f = x.shape[:2]
    if w.shape[0] != f:
        raise ValueError(f"conv_transpose3d: input channels {f} != weight rows {w.shape[0]}")
    c = w.shape[1]
    k = w.shape[2:]
    if b is not None and b.shape != (c,):
        raise ValueError(f"conv_transpose3d: bias shape {b.shape} != ({c},)")
    inner = x.shape[2:]
    out = tuple((inner[i] - 1) * stride + k[i] for i in range(3))
    wf = w.values.reshape(f, -1)
    xf = x.values.transpose(1, 0, 2, 3, 4).reshape(f, -1)
    y = _col2im(wf.T @ xf, (n, c) + out, k, stride, inner)
    if b is not None:
        y += b.values[None, :, None, None, None]

    def bw(g):
        gcols = _im2col(g, k, stride, inner)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wf @ gcols).reshape((f, n) + inner).transpose(1, 0, 2, 3, 4))
        if w.requires_grad:
            gw = (xf @ gcols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._node(y, parents, bw, "conv_transpose3d")


def maxpool3d(x, k=2, stride=None):
    """Window max; ties send the gradient to the first index in x-fastest order."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError("pool size and stride must be >= 1")
    if min(x.shape[2:]) < k:
        raise ValueError(f"pool window {k} exceeds input {x.shape[2:]}")
    n, c = x.shape[:2]
    win = sliding_window_view(x.values, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    out_sp = win.shape[2:5]
    flat = win.reshape(win.shape[:5] + (k ** 3,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    xshape = x.shape

    def bw(g):
        a, rem = np.divmod(arg, k * k)
        bb, e = np.divmod(rem, k)
        od, oh, ow = np.meshgrid(*(np.arange(m) for m in out_sp), indexing="ij")
        zi = od * stride + a
        yi = oh * stride + bb
        xi = ow * stride + e
        flat_idx = (zi * xshape[3] + yi) * xshape[4] + xi
        gx = np.zeros((n, c, int(np.prod(xshape[2:]))))
        rows = np.arange(n * c)[:, None]
        gx2 = gx.reshape(n * c, -1)
        np.add.at(gx2, (rows, flat_idx.reshape(n * c, -1)), g.reshape(n * c, -1))
        return (gx.reshape(xshape),)

    return Tensor._node(np.ascontiguousarray(y), (x,), bw, "maxpool3d")


def upsample_nearest(x, factor=2):
    """Repeat each voxel ``factor`` times along D, H and W."""
    x = as_tensor(x)
    y = x.values
    for ax in (2, 3, 4):
        y = np.repeat(y, factor, axis=ax)
    n, c, d, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, d, factor, h, factor, w, factor).sum(axis=(3, 5, 7)),)

    return Tensor._node(y, (x,), bw, "upsample_nearest")
