"""Hot-kernel backend, chosen once at import.

The compiled extension is used when it was built; otherwise the numpy
versions are used. Set ``QUNET_KERNELS=python`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("QUNET_KERNELS", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward
int_gemm = _impl.int_gemm
pack_bits = _impl.pack_bits
unpack_bits = _impl.unpack_bits

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool2x2",
    "maxpool2x2_backward",
    "int_gemm",
    "pack_bits",
    "unpack_bits",
]
