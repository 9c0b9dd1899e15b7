"""Time every hot kernel under both backends and check they agree bitwise.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --n 200000 --repeat 7

The compiled backend is selected per call with set_backend, so the
AMRKIT_BACKEND environment variable only picks the starting default.  Each
kernel is warmed once per backend before timing (the first numba call pays
for JIT compilation), timed best-of-repeat, and its outputs compared
bitwise across backends; any mismatch fails the run.
"""

import argparse
import sys
import time

import numpy as np

from amrkit import kernels


def _time_best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_deposit(rng, n):
    dim = 3
    grid = 64
    pos = rng.random((n, dim))
    w = rng.random(n) + 0.5
    plo = np.zeros(dim)
    dxinv = np.full(dim, float(grid))
    arr_lo = np.full(dim, -1, dtype=np.int64)  # one ghost layer
    shape = (grid + 2,) * dim

    def run():
        out = np.zeros(shape)
        kernels.deposit_cic(pos, w, plo, dxinv, arr_lo, out)
        return out

    return run


def bench_gather(rng, n):
    dim = 3
    grid = 64
    pos = rng.random((n, dim))
    field = rng.random(((grid + 2,) * dim))
    plo = np.zeros(dim)
    dxinv = np.full(dim, float(grid))
    arr_lo = np.full(dim, -1, dtype=np.int64)

    def run():
        return kernels.gather_cic(pos, plo, dxinv, arr_lo, field)

    return run


def bench_scan(rng, n):
    vals = rng.random(n)

    def run():
        out, carry = kernels.scan_chunk(vals, 0.0, True)
        return out

    return run


def bench_pairs(rng, n):
    # density tuned so each particle sees a handful of candidates
    dim = 3
    pos = rng.random((n, dim))
    cutoff = (20.0 / n) ** (1.0 / dim)

    def run():
        return kernels.neighbor_pairs(pos, np.zeros(dim), np.ones(dim), cutoff)

    return run


def bench_upwind(rng, n):
    line = rng.random(n)

    def run():
        return kernels.upwind_flux(line, 0.75)

    return run


BENCHES = [
    ("deposit_cic", bench_deposit),
    ("gather_cic", bench_gather),
    ("scan_chunk", bench_scan),
    ("neighbor_pairs", bench_pairs),
    ("upwind_flux", bench_upwind),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000, help="problem size per kernel")
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats (best kept)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "numba" not in backends:
        print("numba is not importable; timing the numpy backend only")

    header = f"{'kernel':<16}" + "".join(f"{b + ' (s)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    failures = 0
    for name, setup in BENCHES:
        rng = np.random.default_rng(args.seed)
        run = setup(rng, args.n)
        results = {}
        times = {}
        for backend in backends:
            kernels.set_backend(backend)
            results[backend] = run()  # warm: also pays numba JIT cost
            times[backend] = _time_best(run, args.repeat)
        row = f"{name:<16}" + "".join(f"{times[b]:>14.6f}" for b in backends)
        if len(backends) == 2:
            row += f"{times['numpy'] / times['numba']:>10.2f}"
            a, b = results["numba"], results["numpy"]
            same = (
                a is None and b is None
                if a is None or b is None
                else np.array_equal(np.asarray(a), np.asarray(b))
            )
            if not same:
                row += "  MISMATCH"
                failures += 1
        print(row)

    if failures:
        print(f"{failures} kernel(s) disagree between backends", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
