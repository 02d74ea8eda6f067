"""Differentiable layer ops on NCHW tensors."""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor


def _check4(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D tensor, got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: Optional[int] = None) -> Tensor:
    """Stride-1 cross-correlation, ``padding`` defaults to same-size output."""
    _check4("conv2d input", x)
    _check4("conv2d kernel", weight)
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = weight.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    p = kh // 2 if padding is None else padding
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1

    xd = x.data
    if kh == 1 and kw == 1 and p == 0:
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        xpad = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        cols = kernels.im2col(xpad, kh, kw)
    wmat = weight.data.reshape(cout, -1).astype(xd.dtype, copy=False)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.astype(xd.dtype, copy=False)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gm.T @ cols).reshape(weight.shape).astype(weight.dtype, copy=False)
        db = gm.sum(axis=0).astype(bias.dtype, copy=False) if bias is not None else None
        dcols = gm @ wmat
        if kh == 1 and kw == 1 and p == 0:
            dx = dcols.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        else:
            dxpad = kernels.col2im(dcols, n, cin, h + 2 * p, w + 2 * p, kh, kw)
            dx = dxpad[:, :, p:p + h, p:p + w] if p else dxpad
        return np.ascontiguousarray(dx), dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2x2 transposed convolution with stride 2 (no overlap between taps)."""
    _check4("conv_transpose2d input", x)
    _check4("conv_transpose2d kernel", weight)
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = weight.shape
    if kcin != cin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels but kernel expects {kcin}")
    if (kh, kw) != (2, 2):
        raise ShapeError(f"conv_transpose2d: only 2x2 kernels are supported, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {cout} channels")

    xd = x.data
    xm = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = weight.data.reshape(cin, cout * 4).astype(xd.dtype, copy=False)
    y = (xm @ wm).reshape(n, h, w, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    y = np.ascontiguousarray(y).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        y += bias.data.astype(xd.dtype, copy=False)[None, :, None, None]

    def bw(g):
        gm = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
        dw = (xm.T @ gm).reshape(weight.shape).astype(weight.dtype, copy=False)
        dx = np.ascontiguousarray((gm @ wm.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        db = g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(y, parents, bw, "conv_transpose2d")


def maxpool2d(x: Tensor, return_indices: bool = False):
    """2x2/stride-2 max pooling; ties go to the first element in row-major order."""
    _check4("maxpool2d input", x)
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    out, idx = kernels.maxpool2x2(x.data)

    def bw(g):
        return (kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx),)

    res = Tensor.from_op(out, (x,), bw, "maxpool2d")
    return (res, idx) if return_indices else res


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    eps = np.finfo(d.dtype).eps
    s = np.clip(s, eps, 1 - eps)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4("concat_channels a", a)
    _check4("concat_channels b", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: cannot join {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return Tensor.from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def split_channels(x: Tensor, ca: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels`."""
    d = x.data
    a = Tensor.from_op(
        np.ascontiguousarray(d[:, :ca]), (x,),
        lambda g: (np.concatenate([g, np.zeros_like(d[:, ca:])], axis=1),), "split",
    )
    b = Tensor.from_op(
        np.ascontiguousarray(d[:, ca:]), (x,),
        lambda g: (np.concatenate([np.zeros_like(d[:, :ca]), g], axis=1),), "split",
    )
    return a, b
