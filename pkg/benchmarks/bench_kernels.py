"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from quantunet import _kernels_py as py

try:
    from quantunet import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    x = rng.standard_normal((8, 16, 66, 66)).astype(np.float32)
    cols = rng.standard_normal((8 * 64 * 64, 16 * 9)).astype(np.float32)
    pool = rng.standard_normal((8, 16, 64, 64)).astype(np.float32)
    _, idx = py.maxpool2x2(pool)
    g = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    a = rng.integers(0, 256, (4096, 144), dtype=np.int32)
    b = rng.integers(-7, 8, (144, 16), dtype=np.int32)
    v = rng.integers(-8, 8, 200_000)
    packed = py.pack_bits(v, 4)
    return {
        "im2col 8x16x64x64": lambda k: k.im2col(x, 3, 3),
        "col2im 8x16x64x64": lambda k: k.col2im(cols, 8, 16, 66, 66, 3, 3),
        "maxpool2x2": lambda k: k.maxpool2x2(pool),
        "maxpool2x2_backward": lambda k: k.maxpool2x2_backward(g, idx),
        "int_gemm 4096x144x16": lambda k: k.int_gemm(a, b),
        "pack_bits 200k@4": lambda k: k.pack_bits(v, 4),
        "unpack_bits 200k@4": lambda k: k.unpack_bits(packed, 4, v.size),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<24}{t_py:>12.2f}{'n/a':>12}{'':>10}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_py:>12.2f}{t_cy:>12.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
