"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Inputs are sized like the real call sites: a 12441-row similarity vector,
one 128-row minibatch, and an MMoE-sized parameter vector.
"""
import argparse
import timeit

import numpy as np

from polyrec import _pykernels

try:
    from polyrec import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    n, d = 12441, 600
    unit = rng.standard_normal((n, d))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    sims = unit @ unit[0]
    key = rng.permutation(n).astype(np.int64)
    preds = rng.standard_normal((128, 3))
    labels = rng.standard_normal((128, 3))
    mask = (rng.random((128, 3)) < 0.5).astype(np.uint8)
    mask[:, 0] = 1
    size = 2_500_000  # roughly the MMoE parameter count
    p, g = rng.standard_normal(size), rng.standard_normal(size)
    m, v = np.zeros(size), np.zeros(size)

    yield "topk_select (N=12441, k=100)", lambda mod: mod.topk_select(sims, key, 100, 0)
    yield "masked_mse_grad (128x3)", lambda mod: mod.masked_mse_grad(preds, labels, mask)
    yield "adamw_update (2.5M params)", lambda mod: mod.adamw_update(
        p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1e-3, 0.1, 0.001)


def best_of(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("cython", _kernels)] if _kernels else [])
    print(f"{'kernel':<32}" + "".join(f"{b:>12}" for b, _ in backends) + ("  speedup" if _kernels else ""))
    for name, call in cases(rng):
        times = [best_of(lambda mod=mod: call(mod), args.repeat) for _, mod in backends]
        row = f"{name:<32}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if _kernels:
            row += f"  {times[0] / times[1]:>6.1f}x"
        print(row)
    if _kernels is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
