"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 100000] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from avucal import kernels


def workloads(n, rng):
    logits = rng.normal(size=(n, 10))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p = probs.max(axis=1)
    u = rng.uniform(0, np.log(10), size=n)
    t = np.tanh(u)
    correct = rng.random(n) < 0.8
    uncertain = u > 1.0
    g = np.ones(4)
    return {
        "entropy_rows": lambda: kernels.entropy_rows(probs),
        "hard_counts": lambda: kernels.hard_counts(correct, u, 1.0),
        "soft_counts_forward": lambda: kernels.soft_counts_forward(p, t, correct, uncertain),
        "soft_counts_backward": lambda: kernels.soft_counts_backward(p, t, correct, uncertain, g),
        "binned_sums": lambda: kernels.binned_sums(p, correct.astype(float), 15),
        "average_ranks": lambda: kernels.average_ranks(np.round(u, 2)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        print("compiled kernels not built; only the python backend can be timed")
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    jobs = workloads(args.n, np.random.default_rng(0))
    best = {}
    for name in backends:
        kernels.use_backend(name)
        for job, fn in jobs.items():
            best[job, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"n={args.n}, best of {args.repeat}")
    print(f"{'kernel':<22}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for job in jobs:
        py = best[job, "python"] * 1e3
        if "compiled" in backends:
            c = best[job, "compiled"] * 1e3
            print(f"{job:<22}{py:>12.3f}{c:>14.3f}{py / c:>9.1f}x")
        else:
            print(f"{job:<22}{py:>12.3f}{'-':>14}{'-':>10}")
    kernels.use_backend(backends[-1])


if __name__ == "__main__":
    main()
