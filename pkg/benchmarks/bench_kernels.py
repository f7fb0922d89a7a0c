"""Time each hot kernel in its numba and pure-numpy flavour.

    python3 benchmarks/bench_kernels.py [--m 30000] [--repeat 20]

The numba timings exclude compilation (one warm-up call first). The script
also checks that both flavours return identical arrays.
"""

import argparse
import timeit

import numpy as np

from bail import kernels


def make_inputs(m, time_cap, state_dim, seed):
    rng = np.random.default_rng(seed)
    lengths = []
    left = m
    while left > 0:
        n = min(int(rng.integers(time_cap // 3, time_cap + 1)), left)
        lengths.append(n)
        left -= n
    lengths = np.array(lengths, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    rewards = rng.normal(size=m)
    states = rng.normal(size=(m, state_dim))
    next_last = rng.normal(size=(len(lengths), state_dim))
    truncated = lengths == time_cap
    plain = kernels.discounted_returns_numpy(rewards, starts, lengths, 0.95)
    values = rng.normal(size=m)
    p = rng.normal(size=(128, 128))
    g = rng.normal(size=(128, 128))
    return {
        "discounted_returns": (rewards, starts, lengths, 0.95),
        "augmentation_tail": (states, next_last, plain, starts, lengths, truncated, 0.95, time_cap,
                              int(np.ceil(0.2 * time_cap))),
        "penalty_terms": (values, plain, 1000.0),
        "adam_update": (p, g, np.zeros_like(p), np.zeros_like(p), 3e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=30000)
    ap.add_argument("--time-cap", type=int, default=150)
    ap.add_argument("--state-dim", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    inputs = make_inputs(args.m, args.time_cap, args.state_dim, args.seed)
    print(f"{'kernel':22s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  identical")
    for name, call_args in inputs.items():
        fast = getattr(kernels, f"{name}_numba")
        slow = getattr(kernels, f"{name}_numpy")
        same = _same(fast(*call_args), slow(*call_args))
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        print(f"{name:22s} {t_fast * 1e3:10.3f} {t_slow * 1e3:10.3f} {t_slow / t_fast:8.1f}  {same}")


if __name__ == "__main__":
    main()
