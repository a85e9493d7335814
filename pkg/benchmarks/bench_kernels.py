"""Compare the numba and numpy kernel backends on the hot paths.

Usage:
    python benchmarks/bench_kernels.py [--size 160] [--channels 8] [--batch 4]
                                       [--iters 10]

Times the 3x3 conv forward/backward and 2x2 pool kernels in isolation, then a
full desk-scale U-Net train step (forward + losses + backward + Adam) under
each backend.  The first numba call triggers JIT compilation and is excluded
via a warmup pass.
"""

import argparse
import time

import numpy as np

from cardiomark import kernels
from cardiomark import autodiff as ad
from cardiomark.heatmap import encode, LandmarkSet, VIEWS
from cardiomark.trainer import OptimizerState, adam_step, composite_loss
from cardiomark.unet import UNet, desk_arch


def timeit(fn, iters):
    fn()  # warmup (JIT, caches)
    t0 = time.perf_counter()
    for _ in range(iters):
        fn()
    return (time.perf_counter() - t0) / iters


def bench_kernels(size, channels, batch, iters):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (batch, channels, size, size)).astype(np.float32)
    w = rng.uniform(-1, 1, (channels, channels, 3, 3)).astype(np.float32)
    b = np.zeros(channels, dtype=np.float32)
    gy = rng.uniform(-1, 1, x.shape).astype(np.float32)

    rows = []
    for backend in ("numpy", "numba"):
        kernels.use_backend(backend)
        rows.append((
            backend,
            timeit(lambda: kernels.conv3x3_forward(x, w, b), iters),
            timeit(lambda: kernels.conv3x3_backward(x, w, gy), iters),
            timeit(lambda: kernels.maxpool2_forward(x), iters),
        ))
    return rows


def bench_train_step(size, batch, iters):
    rng = np.random.default_rng(0)
    xs = rng.uniform(-1, 1, (batch, 1, size, size)).astype(np.float32)
    pts = {s: (size * 0.4, size * 0.6) for s in VIEWS["CH2"]}
    lm = LandmarkSet("CH2", pts, (size, size))
    t = np.broadcast_to(encode(lm, size, size, 5.0).probs,
                        (batch, 4, size, size)).copy()

    rows = []
    for backend in ("numpy", "numba"):
        kernels.use_backend(backend)
        model = UNet.build(desk_arch(), seed=0)
        opt = OptimizerState.new({k: p.data for k, p in model.params.items()})

        def step():
            loss, _, _ = composite_loss(model, xs, t, "train")
            model.zero_grads()
            ad.backward(loss)
            adam_step({k: p.data for k, p in model.params.items()},
                      {k: p.grad for k, p in model.params.items()},
                      opt, 1e-3)

        rows.append((backend, timeit(step, iters)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=160)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--iters", type=int, default=10)
    args = ap.parse_args()

    print(f"kernel micro-benchmarks  ({args.batch}x{args.channels}x"
          f"{args.size}x{args.size}, float32, {args.iters} iters)")
    rows = bench_kernels(args.size, args.channels, args.batch, args.iters)
    print(f"{'backend':8s} {'conv fwd':>12s} {'conv bwd':>12s} {'pool fwd':>12s}")
    for name, cf, cb, pf in rows:
        print(f"{name:8s} {cf * 1e3:10.2f}ms {cb * 1e3:10.2f}ms {pf * 1e3:10.2f}ms")
    base = rows[0]
    fast = rows[1]
    print(f"numba speedup: conv fwd x{base[1] / fast[1]:.1f}, "
          f"conv bwd x{base[2] / fast[2]:.1f}, pool x{base[3] / fast[3]:.1f}")

    print(f"\nfull desk U-Net train step (batch {args.batch}, "
          f"{args.size}x{args.size})")
    for name, dt in bench_train_step(args.size, args.batch, max(2, args.iters // 2)):
        print(f"{name:8s} {dt * 1e3:10.1f}ms/step")


if __name__ == "__main__":
    main()
