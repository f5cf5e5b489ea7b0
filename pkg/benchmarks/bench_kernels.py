#!/usr/bin/env python3
"""Time both kernel backends on the two hot paths.

``sgd_epoch`` dominates training and ``match_stats`` dominates evaluation.
The compiled backend mirrors the NumPy reference one to one, so this script
also spot-checks agreement while it measures.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from fedpav.kernels import reference

try:
    from fedpav.kernels import _speedups
except ImportError:
    _speedups = None

TRAIN_CASES = (
    # n, input_dim, feature_dim, num_ids, batch_size
    ("small train", 512, 16, 8, 32, 32),
    ("medium train", 4096, 64, 32, 128, 32),
    ("wide model", 2048, 256, 128, 512, 64),
)

EVAL_CASES = (
    # n_query, n_gallery, n_ids, n_cams
    ("small eval", 100, 400, 40, 4),
    ("medium eval", 500, 2000, 150, 6),
    ("large eval", 1500, 8000, 400, 8),
)


def make_train_args(rng, n, d, f, c, batch):
    args = dict(
        w_b=rng.standard_normal((d, f)) * 0.1,
        b_b=np.zeros(f),
        w_h=rng.standard_normal((f, c)) * 0.1,
        b_h=np.zeros(c),
        m_wb=np.zeros((d, f)),
        m_bb=np.zeros(f),
        m_wh=np.zeros((f, c)),
        m_bh=np.zeros(c),
    )
    inputs = rng.standard_normal((n, d))
    labels = rng.integers(0, c, size=n).astype(np.int64)
    order = rng.permutation(n)
    losses = np.zeros((n + batch - 1) // batch)
    return args, (inputs, labels, order, batch, 0.005, 0.05, 0.9, 5e-4,
                  losses)


def run_train(backend, args, tail):
    live = {k: v.copy() for k, v in args.items()}
    t0 = time.perf_counter()
    backend.sgd_epoch(live["w_b"], live["b_b"], live["w_h"], live["b_h"],
                      live["m_wb"], live["m_bb"], live["m_wh"], live["m_bh"],
                      *tail)
    return time.perf_counter() - t0, live["w_b"]


def make_eval_args(rng, n_q, n_g, n_ids, n_cams):
    sim = rng.standard_normal((n_q, n_g))
    order = np.ascontiguousarray(np.argsort(-sim, axis=1, kind="stable"),
                                 dtype=np.int64)
    return (
        order,
        rng.integers(0, n_ids, size=n_q).astype(np.int64),
        rng.integers(0, n_cams, size=n_q).astype(np.int64),
        rng.integers(0, n_ids, size=n_g).astype(np.int64),
        rng.integers(0, n_cams, size=n_g).astype(np.int64),
    )


def run_eval(backend, args):
    n_q = args[0].shape[0]
    ap = np.zeros(n_q)
    hit = np.zeros(n_q, dtype=np.int64)
    t0 = time.perf_counter()
    backend.match_stats(*args, ap, hit)
    return time.perf_counter() - t0, (ap, hit)


def best_of(fn, repeats):
    times, out = [], None
    for _ in range(repeats):
        dt, out = fn()
        times.append(dt)
    return min(times), out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions per case (best is kept)")
    cli = parser.parse_args()

    if _speedups is None:
        print("compiled backend not built; showing the reference only")
    backends = [("python", reference)]
    if _speedups is not None:
        backends.append(("compiled", _speedups))

    rng = np.random.default_rng(42)
    header = f"{'case':<14}" + "".join(f"{name:>12}" for name, _ in backends)
    if _speedups is not None:
        header += f"{'speedup':>10}"
    print(header)

    for label, n, d, f, c, batch in TRAIN_CASES:
        args, tail = make_train_args(rng, n, d, f, c, batch)
        row, results = [], []
        for _, backend in backends:
            dt, w_b = best_of(lambda b=backend: run_train(b, args, tail),
                              cli.repeats)
            row.append(dt)
            results.append(w_b)
        if len(results) == 2 and not np.allclose(results[0], results[1],
                                                 rtol=1e-12, atol=1e-12):
            raise SystemExit(f"{label}: backends disagree")
        line = f"{label:<14}" + "".join(f"{dt * 1e3:>10.2f}ms" for dt in row)
        if len(row) == 2:
            line += f"{row[0] / row[1]:>9.1f}x"
        print(line)

    for label, n_q, n_g, n_ids, n_cams in EVAL_CASES:
        args = make_eval_args(rng, n_q, n_g, n_ids, n_cams)
        row, results = [], []
        for _, backend in backends:
            dt, out = best_of(lambda b=backend: run_eval(b, args),
                              cli.repeats)
            row.append(dt)
            results.append(out)
        if len(results) == 2:
            same = (np.array_equal(results[0][0], results[1][0])
                    and np.array_equal(results[0][1], results[1][1]))
            if not same:
                raise SystemExit(f"{label}: backends disagree")
        line = f"{label:<14}" + "".join(f"{dt * 1e3:>10.2f}ms" for dt in row)
        if len(row) == 2:
            line += f"{row[0] / row[1]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
