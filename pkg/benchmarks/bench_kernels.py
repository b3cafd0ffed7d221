"""Time the numba and numpy RK4 sweeps on the same coefficient solves.

    python benchmarks/bench_kernels.py [--steps 1e-4] [--repeat 3]

Both backends run in this process by switching ``kernels.BACKEND``; the
numba timings exclude the first (compiling) call. Results must agree to
round-off, which is checked before any number is printed.
"""
import argparse
import time

import numpy as np

from gddim import kernels
from gddim.process import instantiate_process

CASES = {
    "ddpm (scalar blocks)": ("ddpm", {"dim_data": 2}),
    "cld (2x2 blocks)": ("cld", {"dim_data": 2}),
    "bdm 8x8 (freq blocks)": ("bdm", {"grid_shape": (8, 8)}),
}


def solve(spec, rk4_step, lam=1.0):
    Y = kernels.initial_state(spec)
    kernels.advance(spec, 0.0, Y, [1e-4], rk4_step, lam=lam, phase=0)
    Y = kernels.start_factor(Y)
    return kernels.advance(spec, 1e-4, Y, np.linspace(1e-4, 1.0, 50), rk4_step, lam=lam, phase=1)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=float, default=1e-4, help="RK4 step size")
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not available (or GDDIM_DISABLE_NUMBA is set); nothing to compare")
    print(f"{'case':24s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}")
    for label, (kind, params) in CASES.items():
        spec = instantiate_process(kind, params)
        kernels.BACKEND = "numba"
        solve(spec, 1e-2)  # compile
        t_nb, ref = best_of(lambda: solve(spec, args.steps), args.repeat)
        kernels.BACKEND = "numpy"
        t_np, out = best_of(lambda: solve(spec, args.steps), args.repeat)
        kernels.BACKEND = "numba"
        if not np.allclose(ref, out, rtol=1e-9, atol=1e-12):
            raise SystemExit(f"{label}: backends disagree")
        print(f"{label:24s} {t_nb:10.3f} {t_np:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
