"""Benchmark the compiled kernel core against the numpy fallback.

Run:  python3 benchmarks/bench_kernels.py [--reps N]

Shapes mirror the training workload: backbone convolutions on a 64x64
image at channel widths (16, 32, 64), and bilinear sampling of ~27.6k fan
nodes (642 vertices x 43 hypotheses).  The selection policy in
p2mx/kernels/__init__.py follows these numbers: gather/scatter kernels
(bilinear, maxpool) go to the compiled core, convolutions go to the
im2col+BLAS path.
"""

import argparse
import time

import numpy as np

from p2mx.kernels import numpy_backend

try:
    from p2mx.kernels import _core
except ImportError:
    _core = None


def timeit(fn, *args, reps):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / reps)
    return best * 1000.0


def compare(name, fn_np, fn_cy, args, reps):
    t_np = timeit(fn_np, *args, reps=reps)
    if fn_cy is None:
        print(f"{name:34s} numpy {t_np:8.3f} ms   compiled    (unavailable)")
        return
    t_cy = timeit(fn_cy, *args, reps=reps)
    ratio = t_np / t_cy if t_cy > 0 else float("inf")
    winner = "compiled" if t_cy < t_np else "numpy"
    print(f"{name:34s} numpy {t_np:8.3f} ms   compiled {t_cy:8.3f} ms   "
          f"{ratio:6.1f}x -> {winner}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=20)
    args = parser.parse_args()
    reps = args.reps
    rng = np.random.default_rng(0)
    core = _core
    print(f"compiled core available: {core is not None}\n")

    for ci, co, hw in ((16, 16, 64), (32, 32, 32), (64, 64, 16), (1, 16, 64)):
        x = rng.normal(size=(ci, hw, hw)).astype(np.float32)
        w = rng.normal(size=(co, ci, 3, 3)).astype(np.float32)
        g = np.ascontiguousarray(numpy_backend.conv2d_forward(x, w, 1, 1))
        compare(f"conv2d fwd {ci}->{co} @{hw}x{hw}",
                numpy_backend.conv2d_forward,
                core.conv2d_forward if core else None, (x, w, 1, 1), reps)
        compare(f"conv2d bwd-input {ci}->{co} @{hw}x{hw}",
                numpy_backend.conv2d_backward_input,
                core.conv2d_backward_input if core else None, (g, w, x.shape, 1, 1), reps)
        compare(f"conv2d bwd-weight {ci}->{co} @{hw}x{hw}",
                numpy_backend.conv2d_backward_weight,
                core.conv2d_backward_weight if core else None, (g, x, w.shape, 1, 1), reps)
    print()

    fmap = rng.normal(size=(16, 64, 64)).astype(np.float32)
    n_pts = 642 * 43
    xs = rng.uniform(0, 63, size=n_pts).astype(np.float32)
    ys = rng.uniform(0, 63, size=n_pts).astype(np.float32)
    gg = rng.normal(size=(n_pts, 16)).astype(np.float32)
    compare(f"bilinear fwd {n_pts} pts x 16ch",
            numpy_backend.bilinear_forward,
            core.bilinear_forward if core else None, (fmap, xs, ys), reps)
    compare(f"bilinear bwd {n_pts} pts x 16ch",
            numpy_backend.bilinear_backward,
            core.bilinear_backward if core else None, (fmap, xs, ys, gg), reps)
    print()

    x = rng.normal(size=(32, 64, 64)).astype(np.float32)
    compare("maxpool2 fwd 32x64x64",
            numpy_backend.maxpool2_forward,
            core.maxpool2_forward if core else None, (x,), reps)
    out, am = numpy_backend.maxpool2_forward(x)
    compare("maxpool2 bwd 32x64x64",
            numpy_backend.maxpool2_backward,
            core.maxpool2_backward if core else None, (out, am, x.shape), reps)


if __name__ == "__main__":
    main()
