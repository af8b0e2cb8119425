"""Compare the compiled RK4 kernel against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeats 3]

For each system the same batch is integrated with both backends.  The
script prints wall time per backend, the speedup, and the largest absolute
difference between the two results.
"""
import argparse
import time

import numpy as np

from eventdiff import kernels
from eventdiff.dynamics import default_system, initial_conditions

CASES = [
    # (system, batch, dt, n_steps)
    ("lorenz_rescaled", 64, 1e-3, 10000),
    ("fitzhugh_nagumo", 16, 0.05, 20000),
    ("double_pendulum", 64, 1e-3, 10000),
]


def run(kind, params, x0, dt, n_steps, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        start = time.perf_counter()
        out, _ = kernels.rk4_integrate(kernels.SYSTEM_IDS[kind], params, x0, dt, n_steps,
                                       record_every=100)
        best = min(best, time.perf_counter() - start)
    return best, out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernel not built; only the numpy backend is available")
    print(f"{'system':<18}{'batch':>6}{'steps':>8}" + "".join(f"{b + ' [s]':>16}" for b in backends)
          + f"{'speedup':>10}{'max diff':>12}")
    previous = kernels.active_backend()
    try:
        for kind, batch, dt, n_steps in CASES:
            spec = default_system(kind)
            x0 = initial_conditions(spec, batch, seed=0)
            timings, results = {}, {}
            for b in backends:
                kernels.use_backend(b)
                timings[b], results[b] = run(kind, spec.param_vector(), x0, dt, n_steps,
                                             args.repeats)
            speed = timings["numpy"] / timings["compiled"] if "compiled" in timings else 1.0
            diff = (float(np.nanmax(np.abs(results["compiled"] - results["numpy"])))
                    if "compiled" in results else 0.0)
            print(f"{kind:<18}{batch:>6}{n_steps:>8}"
                  + "".join(f"{timings[b]:>16.4f}" for b in backends)
                  + f"{speed:>10.1f}{diff:>12.2e}")
    finally:
        kernels.use_backend(previous)


if __name__ == "__main__":
    main()
