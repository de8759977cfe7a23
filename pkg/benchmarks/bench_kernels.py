"""Benchmark: compiled kernel core vs the pure-numpy fallback.

Times the raw kernels on training-shaped workloads and an end-to-end
conv2d forward+backward through each backend. Usage:

    PYTHONPATH=src python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import latentflow._kernels as hub
from latentflow._kernels import fallback

try:
    from latentflow._kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, repeat):
    fn()  # warm up
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3  # ms


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []

    x = rng.normal(size=(8, 24, 64, 64)).astype(np.float32)
    cols_shape = fallback.im2col2d(x, 3, 3, 2, 2, 1, 1, 1).shape
    cols = rng.normal(size=cols_shape).astype(np.float32)
    x1 = rng.normal(size=(8, 16, 512)).astype(np.float32)
    cols1 = rng.normal(size=fallback.im2col1d(x1, 3, 2, 1, 1).shape).astype(np.float32)
    pts = rng.uniform(0, 2 * np.pi, size=(4000, 2))
    ctr = rng.uniform(0, 2 * np.pi, size=(1024, 2))

    cases = [
        ("im2col2d 8x24x64x64 k3s2", lambda m: m.im2col2d(x, 3, 3, 2, 2, 1, 1, 1)),
        ("col2im2d 8x24x64x64 k3s2",
         lambda m: m.col2im2d(cols, x.shape, 3, 3, 2, 2, 1, 1, 1)),
        ("im2col1d 8x16x512 k3s2", lambda m: m.im2col1d(x1, 3, 2, 1, 1)),
        ("col2im1d 8x16x512 k3s2",
         lambda m: m.col2im1d(cols1, x1.shape, 3, 2, 1, 1)),
        ("ball_query 4000->1024 r=0.5", lambda m: m.ball_query(pts, ctr, 0.5)),
    ]
    for name, fn in cases:
        t_fb = timeit(lambda: fn(fallback), repeat)
        if _ckernels is not None:
            t_c = timeit(lambda: fn(_ckernels), repeat)
            ref, got = fn(fallback), fn(_ckernels)
            if isinstance(ref, tuple):
                delta = max(np.abs(np.asarray(r) - np.asarray(g)).max()
                            for r, g in zip(ref, got))
            else:
                delta = np.abs(ref - got).max()
            rows.append((name, t_fb, t_c, delta))
        else:
            rows.append((name, t_fb, None, 0.0))
    return rows


def bench_conv_end_to_end(repeat):
    """Swap the selected backend and time a conv2d training step."""
    from latentflow.conv import conv2d
    from latentflow.tensor import Tensor

    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 16, 64, 64)).astype(np.float32)
    w = rng.normal(size=(32, 16, 3, 3)).astype(np.float32)

    def step():
        tx = Tensor(x, requires_grad=True)
        tw = Tensor(w, requires_grad=True)
        out = conv2d(tx, tw, stride=2, padding=1, pad_mode="periodic")
        (out * out).mean().backward()
        return tx.grad

    results = []
    backends = [("fallback", fallback)]
    if _ckernels is not None:
        backends.append(("compiled", _ckernels))
    saved = (hub.im2col2d, hub.col2im2d, hub.im2col1d, hub.col2im1d)
    try:
        for name, mod in backends:
            import latentflow.conv as conv_mod

            conv_mod.K.im2col2d = mod.im2col2d
            conv_mod.K.col2im2d = mod.col2im2d
            results.append((name, timeit(step, repeat)))
    finally:
        hub.im2col2d, hub.col2im2d, hub.im2col1d, hub.col2im1d = saved
    return results


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    print(f"selected backend at import: {hub.BACKEND}")
    if _ckernels is None:
        print("compiled kernels not built; timing the fallback only "
              "(run `python3 setup.py build_ext --inplace` first)\n")

    rows = bench_kernels(args.repeat)
    header = f"{'kernel':36} {'fallback ms':>12} {'compiled ms':>12} {'speedup':>8} {'max|diff|':>10}"
    print(header)
    print("-" * len(header))
    for name, t_fb, t_c, delta in rows:
        if t_c is None:
            print(f"{name:36} {t_fb:12.3f} {'-':>12} {'-':>8} {'-':>10}")
        else:
            print(f"{name:36} {t_fb:12.3f} {t_c:12.3f} {t_fb / t_c:8.2f} {delta:10.2e}")

    print("\nconv2d forward+backward (8x16x64x64, k3 s2 periodic):")
    for name, ms in bench_conv_end_to_end(args.repeat):
        print(f"  {name:10} {ms:10.3f} ms")


if __name__ == "__main__":
    main()
