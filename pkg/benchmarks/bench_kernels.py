"""Compare the numba and numpy kernel backends.

Times a full quantile-regression fit and the all-labels APS kernel for a few
problem sizes under each backend, after one warm-up call (which absorbs numba
compilation). Usage::

    python3 benchmarks/bench_kernels.py [--sizes 2000 20000] [--d 6] [--repeat 3] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from kandinsky import _kernels
from kandinsky.pinball import fit_linear_quantile
from kandinsky.scores import aps_all_labels


def best_of(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def qr_problem(n, d, seed=0):
    rng = np.random.default_rng(seed)
    Phi = np.column_stack([(rng.random((n, d - 1)) < 0.5).astype(float), np.ones(n)])
    s = rng.normal(size=n) * (1 + Phi[:, 0]) + 1e-6 * rng.random(n)
    return Phi, s


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[2000, 20000, 80000])
    ap.add_argument("--d", type=int, default=6)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else [])
    rows = []
    for n in args.sizes:
        Phi, s = qr_problem(n, args.d)
        rng = np.random.default_rng(1)
        P = rng.dirichlet(np.ones(args.classes), size=n)
        eps = rng.random(n)
        for b in backends:
            rows.append({
                "n": n,
                "backend": b,
                "qr_fit_s": best_of(lambda: fit_linear_quantile(Phi, s, 0.1, backend=b), args.repeat),
                "aps_s": best_of(lambda: aps_all_labels(P, eps, backend=b), args.repeat),
            })
    print(f"{'n':>8} {'backend':>8} {'qr fit (s)':>12} {'aps (s)':>10}")
    for r in rows:
        print(f"{r['n']:>8} {r['backend']:>8} {r['qr_fit_s']:>12.4f} {r['aps_s']:>10.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"d": args.d, "classes": args.classes, "results": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
