"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 50000] [--m 20] [--repeat 3]
"""

import argparse
import time

import numpy as np

from impalloc import kernels
from impalloc.kernels import python as pyk
from impalloc.traffic import TrafficConfig, generate_day


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, m):
    ds, cs = generate_day(TrafficConfig(n_impressions=n, m_contracts=m, seed=0))
    alpha = np.zeros(m)
    gain = ds.q * cs.quality_weight - ds.b2[:, None] + cs.penalty
    demand = cs.demand.astype(float)
    return {
        "auction_pass": lambda mod: mod.auction_pass(ds.q, cs.quality_weight, alpha, ds.b2),
        "msvv_pass": lambda mod: mod.msvv_pass(ds.q, cs.quality_weight, cs.penalty, ds.b2, demand,
                                               np.zeros(m, dtype=np.int64)),
        "rule_assignment": lambda mod: mod.rule_assignment(gain, cs.penalty),
        "transport_ssp": lambda mod: mod.transport_ssp(gain, cs.demand),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50_000)
    ap.add_argument("--m", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if kernels.compiled is None:
        print("compiled extension not built; only the fallback can be timed")
    print(f"n={args.n} m={args.m} best of {args.repeat}")
    print(f"{'kernel':<16} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for name, run in cases(args.n, args.m).items():
        repeat = 1 if name == "transport_ssp" else args.repeat
        tp = best_of(lambda: run(pyk), repeat)
        if kernels.compiled is None:
            print(f"{name:<16} {tp:>10.4f} {'-':>10} {'-':>8}")
            continue
        tc = best_of(lambda: run(kernels.compiled), repeat)
        print(f"{name:<16} {tp:>10.4f} {tc:>10.4f} {tp / tc:>7.1f}x")


if __name__ == "__main__":
    main()
