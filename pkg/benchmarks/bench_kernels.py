#!/usr/bin/env python3
"""Benchmark the compiled kernel extension against the numpy fallback.

Times each hot kernel on both backends, then a full scene optimization via
subprocess (backend chosen at import time by LAYERSCENE_PURE_PYTHON).

Usage: python benchmarks/bench_kernels.py [--size 64] [--repeat 200]
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np


def bench_kernels(size: int, repeat: int) -> None:
    from layerscene._kernels import _ops

    try:
        from layerscene._kernels import _core
    except ImportError:
        print("compiled extension not built; kernel comparison unavailable")
        return

    rng = np.random.default_rng(0)
    K, c = 4, 4
    masks = (rng.random((K, size, size)) > 0.5).astype(np.float32)
    soft = rng.random((K, size, size)).astype(np.float32)
    feats = rng.standard_normal((K, c, size, size)).astype(np.float32)
    alphas = _ops.alpha_chain_binary(masks)
    view = rng.standard_normal((c, size, size)).astype(np.float32)

    def scatter(impl):
        num = np.zeros((c, size, size), np.float32)
        den = np.zeros((size, size), np.float32)
        impl.scatter_accumulate(num, den, alphas[0], view, 1.0, 3, -2)

    cases = {
        "shift2d": lambda impl: impl.shift2d(feats[0], 3, -2),
        "alpha_binary": lambda impl: impl.alpha_chain_binary(masks),
        "alpha_soft": lambda impl: impl.alpha_chain_soft(soft),
        "composite": lambda impl: impl.composite(alphas, feats),
        "scatter_accumulate": scatter,
    }

    print(f"kernel timings, canvas {size}x{size}, K={K}, c={c}, "
          f"best of {repeat} runs (microseconds):")
    print(f"{'kernel':>20} {'compiled':>12} {'python':>12} {'speedup':>9}")
    for name, fn in cases.items():
        t_ext = min(timeit.repeat(lambda: fn(_core), number=1, repeat=repeat))
        t_py = min(timeit.repeat(lambda: fn(_ops), number=1, repeat=repeat))
        print(f"{name:>20} {t_ext * 1e6:>10.1f}us {t_py * 1e6:>10.1f}us "
              f"{t_py / t_ext:>8.2f}x")


PIPELINE_SNIPPET = """
import time
import numpy as np
from layerscene import ConditionToken, build_schedule
from layerscene import KERNEL_BACKEND
from layerscene.denoiser import PointMassDenoiser
from layerscene.sampler import run_pipeline
from layerscene.scene import LayerSpec, box_mask, full_mask

hw = ({size}, {size})
shape = (4,) + hw
fg, bg = ConditionToken(1, "fg"), ConditionToken(2, "bg")
specs = [
    LayerSpec(mask=box_mask(hw, {size} // 4, {size} // 4, {size} // 3, {size} // 3),
              movement_range=({size} // 5, {size} // 5), condition=fg),
    LayerSpec(mask=full_mask(hw), condition=bg),
]
d = PointMassDenoiser(guidance=1.0)
d.register(fg, np.full(shape, 0.8, np.float32))
d.register(bg, np.full(shape, -0.5, np.float32))
s = build_schedule(50)
run_pipeline(specs, shape=shape, seed=0, d=d, s=s, N=2, tau=45)  # warm
t0 = time.perf_counter()
run_pipeline(specs, shape=shape, seed=0, d=d, s=s, N=8, tau=13)
print(f"{{KERNEL_BACKEND}}: {{time.perf_counter() - t0:.3f}}s")
"""


def bench_pipeline(size: int) -> None:
    print(f"\nfull optimization (T=50, N=8, tau=13, {size}x{size}x4):")
    for pure in ("0", "1"):
        env = dict(os.environ, LAYERSCENE_PURE_PYTHON=pure)
        out = subprocess.run(
            [sys.executable, "-c", PIPELINE_SNIPPET.format(size=size)],
            env=env, capture_output=True, text=True,
        )
        print("  " + (out.stdout.strip() or out.stderr.strip()))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    bench_kernels(args.size, args.repeat)
    bench_pipeline(args.size)


if __name__ == "__main__":
    main()
