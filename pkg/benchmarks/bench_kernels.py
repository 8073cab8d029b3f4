#!/usr/bin/env python3
"""Benchmark the compiled kernel backend against the pure-numpy
fallback.

Times the patch gather/scatter kernels, full convolution forward+
backward through the tensor layer, and the CTC forward-backward
recursion.  Run with both backends available (the compiled extension
builds during `pip install -e .`):

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from vsrkit import tensor as T
from vsrkit.kernels import pure

try:
    from vsrkit.kernels import _fastkernels as fast
except ImportError:
    fast = None


def timeit(fn, repeat=20):
    fn()  # warmup
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_im2col(impl, rng):
    x = rng.normal(size=(128, 16, 17, 17))
    return timeit(lambda: impl.im2col2d(x, 3, 3, 2, 2, 8, 8))


def bench_col2im(impl, rng):
    cols = np.ascontiguousarray(rng.normal(size=(128 * 8 * 8, 16 * 9)))
    return timeit(lambda: impl.col2im2d(cols, 128, 16, 17, 17, 3, 3, 2, 2,
                                        8, 8))


def bench_im2col3d(impl, rng):
    x = rng.normal(size=(1, 1, 18, 36, 36))
    return timeit(lambda: impl.im2col3d(x, 3, 5, 5, 1, 2, 2, 16, 16, 16))


def bench_ctc(impl, rng):
    logits = rng.normal(size=(24, 14))
    logp = np.ascontiguousarray(
        logits - np.log(np.exp(logits).sum(1, keepdims=True)))
    labels = np.array([0, 3, 7, 12, 4, 1, 9, 2], dtype=np.int64)
    return timeit(lambda: impl.ctc_forward_backward(logp, labels, 13),
                  repeat=200)


def bench_conv_train_step(rng):
    """Forward+backward of a training-shaped conv stack through the
    tensor layer (exercises whichever backend is selected)."""
    x = T.Tensor(rng.normal(size=(128, 1, 32, 32)))
    w1 = T.Tensor(rng.normal(size=(16, 1, 5, 5)) * 0.1, requires_grad=True)
    w2 = T.Tensor(rng.normal(size=(32, 16, 3, 3)) * 0.1, requires_grad=True)

    def run():
        h = T.conv2d(x, w1, stride=(2, 2), padding=(2, 2))
        h = T.conv2d(T.relu(h), w2, stride=(2, 2), padding=(1, 1))
        loss = T.sum_(T.mul(h, h))
        w1.grad = w2.grad = None
        T.backward(loss)

    return timeit(run, repeat=10)


def main():
    rng = np.random.default_rng(0)
    rows = [("im2col2d (128x16x17x17, k3 s2)", bench_im2col),
            ("col2im2d (same geometry)", bench_col2im),
            ("im2col3d (stem geometry)", bench_im2col3d),
            ("ctc fwd+bwd (T=24, K=14, U=8)", bench_ctc)]
    print(f"{'kernel':<34} {'pure':>10} {'compiled':>10} {'speedup':>8}")
    for name, bench in rows:
        t_pure = bench(pure, rng)
        if fast is None:
            print(f"{name:<34} {t_pure * 1e6:>8.1f}us {'n/a':>10} {'':>8}")
            continue
        t_fast = bench(fast, rng)
        print(f"{name:<34} {t_pure * 1e6:>8.1f}us {t_fast * 1e6:>8.1f}us "
              f"{t_pure / t_fast:>7.1f}x")
    from vsrkit.kernels import BACKEND
    step = bench_conv_train_step(rng)
    print(f"\nconv stack fwd+bwd via tensor layer ({BACKEND} backend): "
          f"{step * 1e3:.2f} ms")
    print("re-run with VSRKIT_PURE_KERNELS=1 to time the fallback path")


if __name__ == "__main__":
    main()
