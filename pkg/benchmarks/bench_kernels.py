"""Time the compiled and pure-Python annotation kernels on the same inputs.

Usage::

    python3 benchmarks/bench_kernels.py [--terms 200000] [--K 5] [--repeat 5]

Prints one line per (kernel, backend) with the best-of-``repeat`` time and
the speed-up of the compiled backend, after checking both agree.
"""
import argparse
import timeit

import numpy as np

from geocrowd import kernels


def make_inputs(T, K, M, N, seed=0):
    g = np.random.default_rng(seed)
    A = g.dirichlet(np.ones(K), size=(M, K)).transpose(0, 2, 1).copy()
    F = g.dirichlet(np.ones(K), size=N).T.copy()
    item = g.integers(0, N, T).astype(np.int64)
    annot = g.integers(0, M, T).astype(np.int64)
    label = g.integers(0, K, T).astype(np.int64)
    dP = g.normal(size=(T, K))
    return A, F, item, annot, label, dP


def cases(A, F, item, annot, label, dP):
    K, N, M = A.shape[1], F.shape[1], A.shape[0]
    logA, lp, q = np.log(A), np.log(np.full(K, 1 / K)), F.T.copy()
    return {
        "gather_products": lambda mod: mod.gather_products(A, F, item, annot),
        "scatter_grads": lambda mod: mod.scatter_grads(A, F, item, annot, dP),
        "ds_log_posterior": lambda mod: mod.ds_log_posterior(logA, item, annot, label, lp, N),
        "ds_counts": lambda mod: mod.ds_counts(q, item, annot, label, M),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--terms", type=int, default=200_000)
    ap.add_argument("--K", type=int, default=5)
    ap.add_argument("--M", type=int, default=25)
    ap.add_argument("--items", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the python backend only")
    inputs = make_inputs(args.terms, args.K, args.M, args.items)
    print(f"terms={args.terms} K={args.K} M={args.M} items={args.items} best of {args.repeat}")
    for name, fn in cases(*inputs).items():
        times = {}
        outs = {}
        for bname, mod in backends.items():
            outs[bname] = fn(mod)
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        if len(outs) == 2:
            a, b = outs["python"], outs["cython"]
            for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
                np.testing.assert_allclose(y, x, rtol=1e-10, atol=1e-12)
        line = "  ".join(f"{b} {t * 1e3:8.2f} ms" for b, t in times.items())
        if len(times) == 2:
            line += f"  speed-up {times['python'] / times['cython']:5.1f}x"
        print(f"{name:<18s} {line}")


if __name__ == "__main__":
    main()
