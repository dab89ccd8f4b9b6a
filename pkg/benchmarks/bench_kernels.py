"""Time the compiled kernels against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, shape, backend) with the best wall time per
call and the speed-up of the extension over the fallback.
"""

import argparse
import timeit

import numpy as np

from fedarks import kernels


def cases(rng):
    labels = np.repeat(np.arange(4), 2)
    yield "weighted_sum K=3 n=1k", "weighted_sum", (rng.standard_normal((3, 1000)), np.full(3, 1 / 3))
    yield "weighted_sum K=3 n=100k", "weighted_sum", (rng.standard_normal((3, 100_000)), np.full(3, 1 / 3))
    yield "pairwise_sqdist 8x8x16", "pairwise_sqdist", (rng.standard_normal((8, 16)), rng.standard_normal((8, 16)))
    yield "pairwise_sqdist 24x72x16", "pairwise_sqdist", (rng.standard_normal((24, 16)),
                                                          rng.standard_normal((72, 16)))
    d = rng.random((8, 8))
    yield "batch_hard_mine 8", "batch_hard_mine", ((d + d.T) / 2, labels, 0.3)
    ids = np.arange(24) % 12
    yield "rank_queries 24x72", "rank_queries", (rng.random((24, 72)), ids, np.tile(np.arange(12), 6),
                                                 np.zeros(24, np.int64), np.ones(72, np.int64))
    yield "rank_queries 200x2000", "rank_queries", (rng.random((200, 2000)), np.arange(200) % 50,
                                                    np.arange(2000) % 50, np.zeros(200, np.int64),
                                                    rng.integers(0, 3, 2000))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "ext" not in backends:
        print("compiled extension not built; only the NumPy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':28s} {'backend':8s} {'us/call':>10s} {'speed-up':>9s}")
    for label, name, call_args in cases(rng):
        times = {}
        for backend, mod in sorted(backends.items()):
            fn = getattr(mod, name)
            number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*call_args), number=1), 1e-7)))
            best = min(timeit.repeat(lambda: fn(*call_args), number=number, repeat=args.repeat)) / number
            times[backend] = best
        for backend, t in sorted(times.items()):
            ratio = times["python"] / t if backend == "ext" else 1.0
            print(f"{label:28s} {backend:8s} {t * 1e6:10.1f} {ratio:8.2f}x")


if __name__ == "__main__":
    main()
