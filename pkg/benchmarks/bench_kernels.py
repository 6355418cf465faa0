#!/usr/bin/env python3
"""Benchmark the compiled stepping kernel against the numpy fallback.

Usage:  python benchmarks/bench_kernels.py [--quick]

Reports ns per point-step for both backends across point counts, for the
plain point motion and for the tangent-frame variant, plus a long-run
throughput figure for the configuration the demo manifest uses.
"""

import argparse
import time

import numpy as np

from flowlab import kernels
from flowlab.fields import make_field_set
from flowlab.kernels import pure


def bench(impl, packed, n, steps, frames=False, scheme=0, d=3, dim=2):
    rng = np.random.default_rng(0)
    lift = rng.random((n, dim))
    fr = (np.ascontiguousarray(np.broadcast_to(np.eye(dim), (n, dim, dim)).copy())
          if frames else None)
    dW = rng.normal(0, np.sqrt(5e-3), (steps, d))
    t0 = time.perf_counter()
    impl.evolve_steps(packed.modes2pi, packed.cos_coef, packed.sin_coef,
                      packed.offsets, lift, fr, dW, 5e-3, scheme, None, None)
    return (time.perf_counter() - t0) / (n * steps)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true")
    args = parser.parse_args()

    F = make_field_set(2, 3, bandwidth=1, seed=42, divergence_free=True,
                       amplitude=0.14)
    packed = F.packed()
    budget = 200_000 if args.quick else 2_000_000

    impls = [("pure", pure)]
    if kernels.HAVE_COMPILED:
        from flowlab.kernels import _core
        impls.insert(0, ("compiled", _core))
    else:
        print("note: extension not built; benchmarking the fallback only")

    print(f"{'n':>7} | " + " | ".join(f"{name:>9}" for name, _ in impls)
          + "   (ns per point-step, Heun, demo field set)")
    for n in (1, 2, 16, 128, 1024, 10_000):
        steps = max(100, min(20_000, budget // n))
        row = [bench(impl, packed, n, steps) * 1e9 for _, impl in impls]
        print(f"{n:>7} | " + " | ".join(f"{v:>9.1f}" for v in row))

    print("\nwith tangent frames (n = 1):")
    for name, impl in impls:
        v = bench(impl, packed, 1, budget // 10, frames=True) * 1e9
        print(f"  {name:>9}: {v:.1f} ns per point-step")

    name, impl = impls[0]
    t = bench(impl, packed, 2, budget)
    print(f"\nselected backend ({kernels.backend_name()}): "
          f"{1.0 / t / 1e6:.2f} M point-steps/s on the two-point motion")


if __name__ == "__main__":
    main()
