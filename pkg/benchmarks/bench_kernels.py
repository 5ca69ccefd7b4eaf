"""Compare the numba and pure-numpy conv kernels on typical layer shapes.

Times im2col / col2im and a full conv forward+backward composed the same
way the model layers do it (gather + batched GEMM). Run:

    python benchmarks/bench_kernels.py [--dtype float32] [--batch 128]
"""

import argparse
import time

import numpy as np

from dualnorm import kernels

SHAPES = [
    # (c_in, c_out, hw, ksize, stride, pad)   rough small-CNN / ResNet mix
    (3, 16, 32, 3, 1, 1),
    (16, 32, 16, 3, 1, 1),
    (32, 64, 8, 3, 1, 1),
    (64, 64, 8, 3, 1, 1),
    (64, 128, 16, 3, 2, 1),
    (64, 128, 16, 1, 2, 0),
]


def timeit(fn, min_time=0.4):
    fn()
    t0 = time.perf_counter()
    n = 0
    while time.perf_counter() - t0 < min_time:
        fn()
        n += 1
    return (time.perf_counter() - t0) / n


def conv_pass(impl, x, w, stride, pad):
    co, ci, kh, kw = w.shape
    cols = impl.im2col(x, kh, kw, stride, pad)
    y = (w.reshape(co, -1) @ cols)
    dy = y  # stand-in gradient with the right shape
    dw = (dy @ cols.transpose(0, 2, 1)).sum(axis=0)
    dcols = w.reshape(co, -1).T @ dy
    dx = impl.col2im(dcols, x.shape, kh, kw, stride, pad)
    return dx, dw


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dtype", default="float32",
                    choices=("float32", "float64"))
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)
    rng = np.random.default_rng(0)

    backends = {}
    for name in ("numpy", "numba"):
        try:
            backends[name] = kernels.get_backend(name)
        except ImportError:
            print(f"{name}: unavailable")

    print(f"batch={args.batch} dtype={args.dtype} "
          f"(active backend: {kernels.BACKEND})")
    header = f"{'shape':>26} {'op':>9}" + "".join(
        f"{name:>12}" for name in backends)
    print(header)
    for ci, co, hw, k, stride, pad in SHAPES:
        x = rng.normal(0, 1, (args.batch, ci, hw, hw)).astype(dtype)
        w = rng.normal(0, 1, (co, ci, k, k)).astype(dtype)
        gmac = args.batch * co * ci * k * k \
            * ((hw + 2 * pad - k) // stride + 1) ** 2 / 1e9
        label = f"{ci}x{hw}x{hw}->{co} k{k}s{stride}"
        rows = {
            "im2col": lambda impl: impl.im2col(x, k, k, stride, pad),
            "fwd+bwd": lambda impl: conv_pass(impl, x, w, stride, pad),
        }
        for op, fn in rows.items():
            cells = []
            for name, impl in backends.items():
                dt = timeit(lambda impl=impl, fn=fn: fn(impl))
                rate = f" ({3 * gmac / dt:5.1f}G)" if op == "fwd+bwd" else ""
                cells.append(f"{dt * 1e3:8.2f}ms{rate}")
            print(f"{label:>26} {op:>9}" + "".join(f"{c:>12}" for c in cells))


if __name__ == "__main__":
    main()
