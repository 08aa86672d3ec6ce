"""Throughput of the compiled and pure-Python per-transition kernels.

Usage: python3 benchmarks/bench_kernels.py [--transitions N] [--rank K]
"""
import argparse
import time

import numpy as np

from fhtensor import kernels
from fhtensor.environments import make_env
from fhtensor.tensor_core import FactorSet


def bench(backend, env, rank, n, seed=0):
    rng = np.random.default_rng(seed)
    f = FactorSet.random(env.tensor_dims, rank, rng, scale=0.5, pinned_time_row=True)
    theta = f.data
    dims = np.asarray(f.dims, dtype=np.int64)
    n_sm = len(env.state_dims)
    work = np.empty(env.n_actions)
    H = env.horizon
    s = rng.integers(env.n_states, size=n)
    a = rng.integers(env.n_actions, size=n)
    s2 = rng.integers(env.n_states, size=n)
    h = rng.integers(H, size=n)
    r = rng.normal(size=n)
    timings = {}
    t0 = time.perf_counter()
    for i in range(n):
        backend.greedy_action(theta, f.offsets, dims, rank, n_sm, int(s[i]), int(h[i]), work)
    timings["greedy"] = time.perf_counter() - t0
    for name, rule in (("td update", kernels.BCTD), ("residual update", kernels.SBCGD)):
        t0 = time.perf_counter()
        for i in range(n):
            a2 = -1 if h[i] == H - 1 else int(a[(i + 1) % n])
            backend.transition_update(theta, f.offsets, dims, rank, n_sm, int(s[i]), int(a[i]), int(h[i]),
                                      int(s2[i]), a2, float(r[i]), 1e-4, rule, 0)
        timings[name] = time.perf_counter() - t0
    return {k: n / v for k, v in timings.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--transitions", type=int, default=20_000)
    ap.add_argument("--rank", type=int, default=25)
    ap.add_argument("--env", default="wireless")
    args = ap.parse_args()
    env = make_env(args.env, "small")
    names = ["python"]
    try:
        kernels.get_backend("cython")
        names.insert(0, "cython")
    except ImportError:
        print("compiled kernels not built; timing the fallback only")
    results = {name: bench(kernels.get_backend(name), env, args.rank, args.transitions) for name in names}
    ops = list(results[names[0]])
    print(f"{args.env} small, {len(env.tensor_dims)} modes, rank {args.rank}, {args.transitions} calls per op")
    print(f"{'op':<16}" + "".join(f"{n + ' ops/s':>16}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for op in ops:
        row = f"{op:<16}" + "".join(f"{results[n][op]:>16,.0f}" for n in names)
        if len(names) > 1:
            row += f"   {results['cython'][op] / results['python'][op]:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
