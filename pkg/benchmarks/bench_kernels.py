"""Time the numba and numpy paths of each hot kernel on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The numba timings exclude compilation (one warm-up call per kernel).
"""
import argparse
import os
import time

import numpy as np

from cmpekit import _accel
from cmpekit.datagen import _incidence, grid_network, random_pairwise_poly
from cmpekit.polymodel import condition_batch, to_polynomial
from cmpekit import kernels


def cases(rng):
    p = to_polynomial(grid_network(6, 6, seed=0))
    ptr, idx, w = p.compiled
    Y = rng.uniform(size=(4096, p.n_vars))
    ev = list(range(0, 36, 2))
    X = rng.integers(0, 2, size=(4096, len(ev))).astype(float)
    B, _ = condition_batch(random_pairwise_poly(rng, 16, 0.5), [], np.zeros((256, 0)))
    _, _, _, var_ptr, var_terms = _incidence(p)
    U = rng.random((2000, p.n_vars))

    def gibbs():
        z = np.zeros(p.n_vars)
        out = np.zeros((200, p.n_vars))
        kernels.gibbs_sweeps(z, ptr, idx, w, var_ptr, var_terms, U, 10, out)

    return {
        "poly_eval 4096x36": lambda: kernels.poly_eval(Y, ptr, idx, w),
        "poly_grad 4096x36": lambda: kernels.poly_grad(Y, ptr, idx, w),
        "condition 4096 rows": lambda: condition_batch(p, ev, X),
        "subset tables 256x2^16": lambda: B.all_values(),
        "gibbs 2000 sweeps": gibbs,
    }


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    results = {}
    for flag in ("0", "1"):
        os.environ[_accel.ENV_FLAG] = flag
        for name, fn in cases(np.random.default_rng(0)).items():
            results.setdefault(name, []).append(best_of(fn, a.repeat))
    print(f"{'kernel':<26}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for name, (fast, slow) in results.items():
        print(f"{name:<26}{fast:>12.4f}{slow:>12.4f}{slow / fast:>10.1f}")


if __name__ == "__main__":
    main()
