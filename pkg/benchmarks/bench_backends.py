#!/usr/bin/env python3
"""Compare the compiled kernel core against the vectorized numpy fallback.

Times the two hot paths on the experiment-scale configuration: Monte Carlo
replication of one round at a frozen point, and a sequential trajectory.
Also cross-checks that both backends produce the same numbers.

    python benchmarks/bench_backends.py [--trials N] [--rounds N]
"""

import argparse
import time

import numpy as np

from fedsaddle import _kernels_py, backend
from fedsaddle.engine import FederationConfig
from fedsaddle.oracles import MiniBatch, Straggler
from fedsaddle.problem import LogisticProblem, ProblemConfig

try:
    from fedsaddle import _kernels

    HAVE_COMPILED = True
except ImportError:
    _kernels = None
    HAVE_COMPILED = False


def encoded_args(problem, fc, seed=3):
    enc = backend._encode(problem, fc)
    w = 0.3 * np.ones(problem.dim)
    return (
        seed, w, enc["H"], enc["gam"], enc["rho"], enc["d1"], enc["p"], enc["E"],
        enc["L"], enc["mu"], enc["codes"], enc["batches"], enc["sigmas"],
        enc["dists"], enc["swraps"], enc["sdeltas"],
    )


def bench(name, fn, *args, repeat=3):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    print(f"  {name:<28s} {best:8.3f}s")
    return best, out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--trials", type=int, default=20_000)
    parser.add_argument("--rounds", type=int, default=2_000)
    args = parser.parse_args()

    prob = LogisticProblem(
        ProblemConfig(d1=2, d2=2, rho=0.01, K=100, samples_per_agent=20,
                      heterogeneity_scale=0.5, seed=7)
    )
    fc = FederationConfig.uniform(100, 10, 0.05, 10, Straggler(0.5, MiniBatch(1)), seed=2)
    base = encoded_args(prob, fc)
    nan = float("nan")

    print(f"config: K=100 L=10 E=10 straggler/minibatch, dim={prob.dim}")
    print(f"trial_moments, {args.trials} trials (s and d):")
    t_py, out_py = bench("numpy fallback", _kernels_py.trial_moments, *base, args.trials, 0, True)
    if HAVE_COMPILED:
        t_c, out_c = bench("compiled core", _kernels.trial_moments, *base, args.trials, 0, True)
        print(f"  speedup {t_py / t_c:26.1f}x")
        agree = all(
            np.allclose(a, b, rtol=1e-8, atol=1e-10) for a, b in zip(out_py, out_c)
        )
        print(f"  backends agree: {agree}")

    print(f"trajectory, {args.rounds} rounds (decomposition on):")
    t_py, tr_py = bench(
        "numpy fallback", _kernels_py.trajectory,
        base[0], base[1], args.rounds, *base[2:], True, nan, nan, 1e6, 0,
    )
    if HAVE_COMPILED:
        t_c, tr_c = bench(
            "compiled core", _kernels.trajectory,
            base[0], base[1], args.rounds, *base[2:], True, nan, nan, 1e6, 0,
        )
        print(f"  speedup {t_py / t_c:26.1f}x")
        agree = np.allclose(tr_py[0], tr_c[0], rtol=1e-8, atol=1e-10)
        print(f"  backends agree: {agree}")
    if not HAVE_COMPILED:
        print("compiled extension not built; run: python setup.py build_ext --inplace")


if __name__ == "__main__":
    main()
