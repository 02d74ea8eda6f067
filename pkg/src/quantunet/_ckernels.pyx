# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Loop orders follow the numpy reference so reductions happen in the same
sequence and results are bit-identical across backends.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int8_t, int32_t, int64_t, uint8_t, uint64_t

cnp.import_array()

ctypedef fused real_or_int:
    float
    double
    int32_t
    int64_t

ctypedef fused real:
    float
    double


def _im2col(real_or_int[:, :, :, ::1] xpad, real_or_int[:, ::1] cols, int kh, int kw):
    cdef Py_ssize_t n = xpad.shape[0], c = xpad.shape[1]
    cdef Py_ssize_t h = xpad.shape[2] - kh + 1, w = xpad.shape[3] - kw + 1
    cdef Py_ssize_t b, i, j, ch, a, bb, row, col
    with nogil:
        row = 0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    col = 0
                    for ch in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                cols[row, col] = xpad[b, ch, i + a, j + bb]
                                col = col + 1
                    row = row + 1


def im2col(xpad, int kh, int kw):
    xpad = np.ascontiguousarray(xpad)
    n, c, hp, wp = xpad.shape
    h, w = hp - kh + 1, wp - kw + 1
    cols = np.empty((n * h * w, c * kh * kw), dtype=xpad.dtype)
    _im2col(xpad, cols, kh, kw)
    return cols


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out, int kh, int kw):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t h = out.shape[2] - kh + 1, w = out.shape[3] - kw + 1
    cdef Py_ssize_t a, bb, b, ch, i, j, col
    with nogil:
        for a in range(kh):
            for bb in range(kw):
                for b in range(n):
                    for ch in range(c):
                        col = (ch * kh + a) * kw + bb
                        for i in range(h):
                            for j in range(w):
                                out[b, ch, i + a, j + bb] += cols[(b * h + i) * w + j, col]


def col2im(cols, int n, int c, int hp, int wp, int kh, int kw):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    _col2im(cols, out, kh, kw)
    return out


def _maxpool(real_or_int[:, :, :, ::1] x, real_or_int[:, :, :, ::1] out, int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h2 = out.shape[2], w2 = out.shape[3]
    cdef Py_ssize_t b, ch, i, j
    cdef int8_t k, best
    cdef real_or_int m, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(h2):
                    for j in range(w2):
                        m = x[b, ch, 2 * i, 2 * j]
                        best = 0
                        for k in range(1, 4):
                            v = x[b, ch, 2 * i + k // 2, 2 * j + k % 2]
                            if v > m:
                                m = v
                                best = k
                        out[b, ch, i, j] = m
                        idx[b, ch, i, j] = best


def maxpool2x2(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    _maxpool(x, out, idx)
    return out, idx


def _maxpool_bwd(real[:, :, :, ::1] grad, int8_t[:, :, :, ::1] idx, real[:, :, :, ::1] out):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], h2 = grad.shape[2], w2 = grad.shape[3]
    cdef Py_ssize_t b, ch, i, j
    cdef int8_t k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(h2):
                    for j in range(w2):
                        k = idx[b, ch, i, j]
                        out[b, ch, 2 * i + k // 2, 2 * j + k % 2] = grad[b, ch, i, j]


def maxpool2x2_backward(grad, idx):
    grad = np.ascontiguousarray(grad)
    n, c, h2, w2 = grad.shape
    out = np.zeros((n, c, h2 * 2, w2 * 2), dtype=grad.dtype)
    _maxpool_bwd(grad, np.ascontiguousarray(idx, dtype=np.int8), out)
    return out


def _int_gemm(int32_t[:, ::1] a, int32_t[:, ::1] b, int64_t[:, ::1] out):
    cdef Py_ssize_t m = a.shape[0], kdim = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef int64_t av
    cdef int64_t* orow
    cdef const int32_t* brow
    if m == 0 or n == 0 or kdim == 0:
        return
    with nogil:
        for i in range(m):
            orow = &out[i, 0]
            for k in range(kdim):
                av = a[i, k]
                if av == 0:
                    continue
                brow = &b[k, 0]
                for j in range(n):
                    orow[j] += av * brow[j]


def int_gemm(a, b):
    """Integer matrix product with 64-bit accumulation."""
    a = np.ascontiguousarray(a, dtype=np.int32)
    b = np.ascontiguousarray(b, dtype=np.int32)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.int64)
    _int_gemm(a, b, out)
    return out


def pack_bits(values, int bits):
    cdef int64_t[::1] v = np.ascontiguousarray(values, dtype=np.int64)
    cdef Py_ssize_t count = v.shape[0]
    if count == 0:
        return b""
    out_arr = np.zeros((count * bits + 7) // 8, dtype=np.uint8)
    cdef uint8_t[::1] out = out_arr
    cdef uint64_t mask = (1 << bits) - 1
    cdef uint64_t acc = 0
    cdef int nacc = 0
    cdef Py_ssize_t i, pos = 0
    with nogil:
        for i in range(count):
            acc |= (<uint64_t>v[i] & mask) << nacc
            nacc += bits
            while nacc >= 8:
                out[pos] = acc & 0xFF
                pos += 1
                acc >>= 8
                nacc -= 8
        if nacc > 0:
            out[pos] = acc & 0xFF
    return out_arr.tobytes()


def unpack_bits(data, int bits, Py_ssize_t count):
    out_arr = np.zeros(count, dtype=np.int32)
    if count == 0:
        return out_arr
    cdef const uint8_t[::1] raw = np.frombuffer(data, dtype=np.uint8)
    cdef int32_t[::1] out = out_arr
    cdef uint64_t mask = (1 << bits) - 1
    cdef int32_t sign = 1 << (bits - 1)
    cdef uint64_t acc = 0
    cdef int nacc = 0
    cdef Py_ssize_t i, pos = 0
    cdef int32_t u
    with nogil:
        for i in range(count):
            while nacc < bits:
                acc |= (<uint64_t>raw[pos]) << nacc
                pos += 1
                nacc += 8
            u = <int32_t>(acc & mask)
            acc >>= bits
            nacc -= bits
            if u >= sign:
                u -= 1 << bits
            out[i] = u
    return out_arr
