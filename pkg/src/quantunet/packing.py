"""Sub-byte two's-complement bit packing.

Value ``i`` occupies bit positions ``[i*bits, (i+1)*bits)`` counting from the
least significant bit of byte 0; trailing pad bits are zero.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import PackError


def _check_bits(bits: int) -> None:
    if not 2 <= bits <= 8:
        raise PackError(f"bit width must be in 2..8, got {bits}")


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_bits(values, bits: int) -> bytes:
    _check_bits(bits)
    v = np.asarray(values, dtype=np.int64).ravel()
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    bad = np.flatnonzero((v < lo) | (v > hi))
    if bad.size:
        i = int(bad[0])
        raise PackError(f"value {int(v[i])} at index {i} does not fit in {bits}-bit two's complement")
    return kernels.pack_bits(v, bits)


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    _check_bits(bits)
    if len(data) < packed_size(count, bits):
        raise PackError(f"need {packed_size(count, bits)} bytes for {count} values, got {len(data)}")
    return kernels.unpack_bits(bytes(data), bits, count)
