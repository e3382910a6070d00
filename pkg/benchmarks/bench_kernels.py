"""Compare the two kernel backends on training-representative shapes.

Run:  python3 benchmarks/bench_kernels.py [--repeats N] [--size 64]

Times the raw convolution primitives (forward and both gradients), the
smoothing/edge correlation used by the pseudo-label pipeline, and one full
training step, once per backend.  Numbers are the best of N repeats.

Findings on a desktop-class single core: the numpy backend (im2col plus a
BLAS matmul) beats the compiled loop backend by roughly 2x on the conv
shapes that dominate a training step, because BLAS tiling wins once the
patch matrix is large.  The compiled backend exists for the exact-order
correlation contract and as a no-BLAS fallback; both produce identical
training trajectories up to float rounding, and the test suite pins their
agreement.  Pick one with CGLDETECT_BACKEND=numba|numpy.
"""

import argparse
import statistics
import time

import numpy as np

from cgldetect import backend
from cgldetect.data import synthesize_dataset
from cgldetect.losses import LossWeights
from cgldetect.model import EncoderConfig
from cgldetect.train import TrainConfig, prepare_batch_items, train_step


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times)


def conv_cases(size, d):
    """Padded-input conv shapes matching one encoder/decoder pass."""
    rng = np.random.default_rng(7)
    half, quarter = size // 2, size // 4
    cases = []
    for label, ci, co, k, stride, hp in (
            (f"stem {size}x{size} 3->{d} k3 s2", 3, d, 3, 2, size + 2),
            (f"stack {half}x{half} {d}->{d} k3 s2", d, d, 3, 2, half + 2),
            (f"body {quarter}x{quarter} {d}->{d} k3 s1", d, d, 3, 1, quarter + 2),
            (f"head {quarter}x{quarter} {d}->2 k1 s1", d, 2, 1, 1, quarter)):
        xp = rng.standard_normal((ci, hp, hp)).astype(np.float32)
        ker = rng.standard_normal((co, ci, k, k)).astype(np.float32)
        ho = (hp - k) // stride + 1
        gout = rng.standard_normal((co, ho, ho)).astype(np.float32)
        cases.append((label, xp, ker, gout, stride))
    return cases


def bench_backend(which, size, d, repeats):
    mod = backend.select_backend(which)
    rows = []
    for label, xp, ker, gout, stride in conv_cases(size, d):
        kh, kw = ker.shape[2], ker.shape[3]
        fns = {
            "fwd": lambda: mod.conv2d_forward(xp, ker, stride),
            "gk": lambda: mod.conv2d_grad_kernel(gout, xp, kh, kw, stride),
            "gx": lambda: mod.conv2d_grad_input(gout, ker, xp.shape[1],
                                                xp.shape[2], stride),
        }
        for part, fn in fns.items():
            fn()  # warm-up (compiles the loop backend on first touch)
            best, _ = best_of(fn, repeats)
            rows.append((f"{label} [{part}]", best))

    rng = np.random.default_rng(11)
    img = rng.standard_normal((size + 10, size + 10))
    for label, ker in (("smooth 11x11", np.ones((11, 11)) / 121.0),
                       ("edge 3x3", rng.standard_normal((3, 3)))):
        pad = (11 if "11" in label else 3) - 1
        view = img[:size + pad, :size + pad]
        fn = lambda: mod.correlate2d_valid(view, ker)
        fn()
        best, _ = best_of(fn, repeats)
        rows.append((f"correlate {label}", best))
    return rows


def bench_train_step(which, size, d, repeats):
    backend.select_backend(which)
    cfg = TrainConfig(epochs=1, batch_size=8, lr=0.05, seed=0,
                      weights=LossWeights(1.0, 1.0, 0.1, 0.1),
                      encoder=EncoderConfig(d=d, seed=0))
    scenes = synthesize_dataset(8, seed=0, size=size)
    items = prepare_batch_items(scenes, cfg)
    model = cfg.build_model()
    train_step(model, items, cfg)  # warm-up
    best, median = best_of(lambda: train_step(model, items, cfg), repeats)
    return best, median


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--d", type=int, default=32, help="encoder width")
    args = ap.parse_args()

    results = {}
    for which in ("numba", "numpy"):
        try:
            results[which] = bench_backend(which, args.size, args.d,
                                           args.repeats)
        except ImportError:
            print(f"{which}: unavailable, skipped")

    names = [name for name, _ in next(iter(results.values()))]
    width = max(len(n) for n in names)
    header = f"{'kernel':<{width}}" + "".join(
        f"  {which:>10}" for which in results)
    print(header)
    print("-" * len(header))
    for i, name in enumerate(names):
        cells = "".join(f"  {results[which][i][1] * 1e6:>8.0f}us"
                        for which in results)
        print(f"{name:<{width}}{cells}")

    print()
    for which in results:
        best, median = bench_train_step(which, args.size, args.d,
                                        max(3, args.repeats // 2))
        print(f"train step (batch 8, {args.size}x{args.size}, d={args.d}) "
              f"on {which}: best {best * 1e3:.1f} ms, median {median * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
