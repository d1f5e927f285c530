"""Time the compiled and NumPy gradient-descent kernels on refit-sized problems.

    python3 benchmarks/bench_kernels.py [--repeat N] [--threads N]

Each case is one ensemble refit as run inside an episode with the bundled
settings (K=50, d=20, 100 steps). Prints the median wall time per backend and
the speed-up of the compiled kernels.
"""
import argparse
import statistics
import time

import numpy as np

from ensemble_sampling import kernels
from ensemble_sampling.neural import duplicate_context, init_network


def glm_case(g, m=10, K=50, d=20):
    X = g.standard_normal((K, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    counts = g.integers(0, 200, K).astype(float)
    sums = g.uniform(0, 1, (m, K)) * counts
    theta = 0.1 * g.standard_normal((m, d))

    def run(backend, threads):
        th = theta.copy()
        backend.glm_gd(th, X, counts, sums, 1.0, True, 100, 0.01 / counts.sum(), None, threads)
    return run


def neural_case(g, m=10, K=50, d=20, width=20, depth=3):
    X = np.ascontiguousarray(duplicate_context(g.standard_normal((K, d)) / np.sqrt(d)))
    p0 = np.stack([init_network(2 * d, width, depth, g).flat for _ in range(m)])
    counts = g.integers(0, 200, K).astype(float)
    ys = g.standard_normal((m, K))
    sums, sumsq = ys * counts, ys ** 2 * counts

    def run(backend, threads):
        params = p0.copy()
        backend.neural_gd(params, p0, X, counts, sums, sumsq, width, depth, 1.0, 100,
                          0.01 / counts.sum(), None, threads)
    return run


def median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    g = np.random.default_rng(0)
    cases = {"glm refit (m=10)": glm_case(g), "neural refit (m=10, N=20, L=3)": neural_case(g)}
    backends = kernels.available_backends()
    print(f"{'case':34s}" + "".join(f"{b:>12s}" for b in backends) + "     speed-up")
    for name, run in cases.items():
        times = {b: median_time(lambda b=b: run(kernels.get_backend(b), args.threads), args.repeat)
                 for b in backends}
        row = f"{name:34s}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:12.1f}x"
        print(row)


if __name__ == "__main__":
    main()
