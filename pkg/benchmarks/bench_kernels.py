"""Benchmark the compiled convolution lane against the numpy fallback.

Run:  python benchmarks/bench_kernels.py [--repeats N]

Times the three hot paths (forward, backward-input, backward-kernel) on
layer shapes representative of the displacement estimator, plus one full
training step through the whole network in each lane.
"""

import argparse
import os
import time

import numpy as np


def _timeit(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


LAYER_CASES = [
    ("2d 64x64 enc1", (16, 2, 3, 3), (2, 64, 64), (2, 2)),
    ("2d 32x32 enc2", (32, 16, 3, 3), (16, 32, 32), (2, 2)),
    ("2d 64x64 dec", (16, 18, 3, 3), (18, 64, 64), (1, 1)),
    ("3d 64x64x32 enc1", (16, 2, 3, 3, 3), (2, 64, 64, 32), (2, 2, 2)),
    ("3d 32x32x16 enc2", (32, 16, 3, 3, 3), (16, 32, 32, 16), (2, 2, 2)),
]


def bench_kernels(repeats):
    from epiunwarp.kernels import _conv_np

    try:
        from epiunwarp.kernels import _conv_cy
    except ImportError:
        _conv_cy = None
        print("compiled lane not built; benchmarking the fallback only\n")

    lanes = [("numpy", _conv_np)] + ([("compiled", _conv_cy)] if _conv_cy else [])
    print(f"{'case':<22}{'path':<14}" + "".join(f"{name:>12}" for name, _ in lanes)
          + f"{'speedup':>10}")
    rng = np.random.default_rng(0)
    for case, kshape, xshape, strides in LAYER_CASES:
        x = rng.normal(size=xshape)
        k = rng.normal(size=kshape)
        fwd = lanes[0][1].conv_forward(x, k, strides)
        gout = rng.normal(size=fwd.shape)
        paths = [
            ("forward", lambda m: m.conv_forward(x, k, strides)),
            ("bwd_input", lambda m: m.conv_bwd_input(k, gout, xshape[1:], strides)),
            ("bwd_kernel", lambda m: m.conv_bwd_kernel(x, gout, kshape[2:], strides)),
        ]
        for path_name, call in paths:
            times = [_timeit(lambda m=mod: call(m), repeats) for _, mod in lanes]
            row = f"{case:<22}{path_name:<14}"
            row += "".join(f"{t * 1e3:>10.2f}ms" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>9.2f}x"
            print(row)


def bench_train_step(repeats):
    from epiunwarp.autodiff import Tape, Tensor, backward, linear_sample_pe
    from epiunwarp.losses import LossConfig, total_loss
    from epiunwarp.trainer import AdamState, adam_step
    from epiunwarp.unet import UNetConfig, unet_forward, unet_init

    rng = np.random.default_rng(1)
    t1w = Tensor(rng.uniform(size=(64, 64)))
    epi = Tensor(rng.uniform(size=(64, 64)))
    weights = unet_init(UNetConfig(seed=0))
    params = weights.parameters()
    state = AdamState.for_params(params)
    lcfg = LossConfig(mode="self_supervised")

    def step():
        for p in params:
            p.grad = None
        with Tape() as tape:
            gdm = unet_forward(weights, t1w, epi)
            parts = total_loss(lcfg, gdm, linear_sample_pe(epi, gdm, 0), t1w)
        backward(tape, parts["total"])
        adam_step(params, [p.grad for p in params], state, 1e-5)

    t = _timeit(step, repeats)
    print(f"\nfull 2-D training step (64x64, default filters): {t * 1e3:.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    lane = "pure numpy (forced)" if os.environ.get("EPIUNWARP_PURE_PYTHON") else "auto"
    print(f"kernel lane selection: {lane}\n")
    bench_kernels(args.repeats)
    bench_train_step(args.repeats)
    if not os.environ.get("EPIUNWARP_PURE_PYTHON"):
        print("\n(re-run with EPIUNWARP_PURE_PYTHON=1 to time the whole stack "
              "on the fallback lane)")


if __name__ == "__main__":
    main()
