"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints per-kernel median times and speedups, then the end-to-end cost of a
conv forward/backward pass and one simple-gradient attack step.
"""
import argparse
import statistics
import time

import numpy as np

from nnfrag import _kernels_py, engine

try:
    from nnfrag import _kernels
except ImportError:
    _kernels = None


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def kernel_cases(rng):
    x_mnist = rng.random((64, 1, 28, 28))
    x_cifar = rng.random((16, 96, 32, 32))
    cols = _kernels_py.im2col(x_cifar, 3, 3, 1, 1)
    z = rng.normal(size=(256, 4096))
    return [
        ("im2col mnist 64x1x28x28 k3 s2", "im2col", (x_mnist, 3, 3, 2, 1)),
        ("im2col cifar 16x96x32x32 k3 s1", "im2col", (x_cifar, 3, 3, 1, 1)),
        ("col2im cifar 16x96x32x32 k3 s1", "col2im", (cols, x_cifar.shape, 3, 3, 1, 1)),
        ("softplus family 256x4096", "softplus_family", (z, 10.0)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)

    print(f"{'kernel':34s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for label, name, fargs in kernel_cases(rng):
        tp = median_time(lambda: getattr(_kernels_py, name)(*fargs), args.repeat)
        if _kernels is None:
            print(f"{label:34s} {tp * 1e3:10.2f} {'n/a':>12s} {'':>8s}")
            continue
        tc = median_time(lambda: getattr(_kernels, name)(*fargs), args.repeat)
        print(f"{label:34s} {tp * 1e3:10.2f} {tc * 1e3:12.2f} {tp / tc:7.1f}x")

    m = engine.preset("cnn_mnist", seed=0).smooth()
    x = rng.random((1, 28, 28))
    t = median_time(lambda: engine.grad_input(m, x, 3), args.repeat)
    print(f"\ncnn_mnist grad_input (active backend {engine.kernels.BACKEND}): {t * 1e3:.2f} ms")
    t = median_time(lambda: engine.hessian_input_vp(m, x, x, 3), args.repeat)
    print(f"cnn_mnist Hessian-vector product: {t * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
