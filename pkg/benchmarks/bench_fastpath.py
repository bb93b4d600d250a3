"""Time each fastpath kernel under its numba and numpy variants.

    python benchmarks/bench_fastpath.py [--repeat 5] [--csv out.csv]

Numba variants are warmed up once so compile time is excluded.  ``forward_em``
is timed per step (the public wrapper loops over steps and draws the noise).  Both variants
are called directly, so the VSMD_DISABLE_NUMBA flag does not matter here.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from vsmd import fastpath
from vsmd._accel import HAVE_NUMBA


def cases(rng):
    n, d = 10_000, 2
    x, v = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    kx, cv = np.full(d, 0.8), np.full(d, 1.6)
    A = rng.standard_normal((500, 2, 2))
    S = np.einsum("nij,nkj->nik", A, A) + 1e-3 * np.eye(2)
    M = rng.standard_normal((n, d, 2, 2))
    sc = rng.standard_normal((n, d))
    noise = rng.standard_normal((n, d))
    decay, kick, sd = fastpath.o_coefficients(cv, 5.0, 2.0, 0.008)
    ens, obs = rng.standard_normal((200, 500)), rng.standard_normal(500)
    return {
        "expm_batch": (A,),
        "chol2_batch": (S,),
        "apply_blocks": (M, x, v),
        "apply_blocks/shared": (M[:1], x, v),
        "em_update": (x, v, kx, cv, 5.0, sc, noise, 0.008),
        "ab_half": (x, v, kx, 5.0, 0.008),
        "o_update": (v, decay, kick, sd, sc, noise),
        "forward_em": (x.copy(), v.copy(), kx, cv, 5.0, 2.0, 0.004, noise),
        "crps_ensemble": (ens, obs),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--csv", help="also write results to this file")
    args = p.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba not installed; only the numpy variants can run", file=sys.stderr)
    rows = []
    for name, call_args in cases(np.random.default_rng(0)).items():
        timings = {}
        for variant in ("numpy", "numba"):
            fn = getattr(fastpath, f"_{name.split('/')[0]}_{variant}")
            if variant == "numba" and not HAVE_NUMBA:
                continue
            fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in call_args])  # warm-up / compile
            t = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
            timings[variant] = t
        speedup = timings["numpy"] / timings["numba"] if "numba" in timings else float("nan")
        rows.append((name, timings.get("numpy"), timings.get("numba"), speedup))
        print(f"{name:20s} numpy {timings['numpy'] * 1e3:9.3f} ms   numba "
              f"{timings.get('numba', float('nan')) * 1e3:9.3f} ms   speedup {speedup:6.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "numpy_seconds", "numba_seconds", "speedup"])
            for r in rows:
                w.writerow([r[0]] + [f"{v:.17g}" for v in r[1:]])
    return 0


if __name__ == "__main__":
    sys.exit(main())
