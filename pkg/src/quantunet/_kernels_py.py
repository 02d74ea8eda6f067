"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
here with the same floating-point accumulation order so both backends give
bit-identical results.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xpad, kh, kw):
    """Unfold a padded [N, C, Hp, Wp] array into [N*H*W, C*kh*kw] rows."""
    n, c, hp, wp = xpad.shape
    h, w = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw):
    """Adjoint of :func:`im2col`; returns the padded gradient array."""
    h, w = hp - kh + 1, wp - kw + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(n, h, w, c, kh, kw)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + h, b:b + w] += blocks[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return out


def maxpool2x2(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx):
    n, c, h2, w2 = grad.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.int8)
    g = np.where(onehot, grad[..., None], 0).astype(grad.dtype)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g).reshape(n, c, h2 * 2, w2 * 2)


def int_gemm(a, b):
    """Integer matrix product with 64-bit accumulation."""
    return np.matmul(a.astype(np.int64), b.astype(np.int64))


def pack_bits(values, bits):
    v = np.asarray(values, dtype=np.int64)
    if v.size == 0:
        return b""
    u = (v & ((1 << bits) - 1)).astype(np.uint8)
    bitarr = ((u[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    return np.packbits(bitarr.ravel(), bitorder="little").tobytes()


def unpack_bits(data, bits, count):
    if count == 0:
        return np.zeros(0, dtype=np.int32)
    raw = np.frombuffer(data, dtype=np.uint8)
    bitarr = np.unpackbits(raw, bitorder="little")[: count * bits].reshape(count, bits)
    u = (bitarr.astype(np.int32) << np.arange(bits, dtype=np.int32)).sum(axis=1, dtype=np.int32)
    sign = 1 << (bits - 1)
    return np.where(u >= sign, u - (1 << bits), u).astype(np.int32)
