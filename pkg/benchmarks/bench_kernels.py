#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each hot kernel on realistic shapes (images x concepts x classes at
roughly CUB scale) and prints a timing table. The numpy column is what
CONCEPTEVO_NO_NUMBA=1 selects at import time.

Usage: python3 benchmarks/bench_kernels.py [--images N] [--concepts C]
       [--classes Y] [--epochs E] [--repeat R]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from conceptevo import _kernels


def timeit(fn, repeat: int) -> float:
    fn()  # warm-up (and JIT compile for the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--images", type=int, default=4000)
    parser.add_argument("--concepts", type=int, default=1000)
    parser.add_argument("--classes", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=3)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    if not _kernels.HAS_NUMBA:
        print("numba unavailable or disabled; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    x = rng.normal(size=(args.images, args.concepts))
    y = rng.integers(0, args.classes, size=args.images).astype(np.int64)
    w0 = rng.normal(size=(args.concepts, args.classes)) * 0.01
    perms = np.stack(
        [rng.permutation(args.images) for _ in range(args.epochs)]
    ).astype(np.int64)
    logits = np.ascontiguousarray(rng.normal(size=(args.images, args.classes)))
    sorted_cols = np.ascontiguousarray(np.sort(logits, axis=0))

    rows = []
    rows.append(
        (
            f"sgd_train {args.images}x{args.concepts}x{args.classes}, {args.epochs} epochs",
            timeit(lambda: _kernels._nb_sgd_train(x, y, w0, 0.01, 0.0, args.batch, perms), args.repeat),
            timeit(lambda: _kernels._np_sgd_train(x, y, w0, 0.01, 0.0, args.batch, perms), args.repeat),
        )
    )
    rows.append(
        (
            f"topk_indices {args.images}x{args.classes}, k=3",
            timeit(lambda: _kernels._nb_topk_indices(logits, 3), args.repeat),
            timeit(lambda: _kernels._np_topk_indices(logits, 3), args.repeat),
        )
    )
    rows.append(
        (
            f"pairwise_sorted_l1 {args.images}x{args.classes}",
            timeit(lambda: _kernels._nb_pairwise_sorted_l1(sorted_cols), args.repeat),
            timeit(lambda: _kernels._np_pairwise_sorted_l1(sorted_cols), args.repeat),
        )
    )

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}")
    for name, nb, np_ in rows:
        print(f"{name:<{width}}  {nb:>9.4f}s  {np_:>9.4f}s  {np_ / nb:>7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
