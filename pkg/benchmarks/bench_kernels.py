"""Time the numba and pure-numpy implementations of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 128]

Both paths are called directly via ``.numba_impl`` / ``.numpy_impl`` so the
result does not depend on ``CALIBRA_BACKEND``.  The first numba call (JIT
compile or cache load) is excluded from the timings.
"""
from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from calibra import kernels


def cases(size: int, rng):
    img = rng.normal(size=(4, size, size))
    labels = rng.integers(0, 4, (size, size))
    valid = rng.random((size, size)) > 0.05
    pts_a = rng.uniform(0, size, (size * 8, 2))
    pts_b = rng.uniform(0, size, (size * 8, 2))
    probs = rng.uniform(0.05, 0.95, (size * size, 5))
    reg = np.full(size * size, 0.01)
    return {
        "im2col_dilated": (kernels.im2col_dilated, (img, 5, 2)),
        "window_minmax": (kernels.window_minmax, (labels, valid, 2)),
        "min_distances": (kernels.min_distances, (pts_a, pts_b)),
        "jlf_solve": (kernels.jlf_solve, (probs, reg)),
    }


def _tup(x):
    return x if isinstance(x, tuple) else (x,)


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=128, help="image side length")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = ap.parse_args(argv)

    rows = []
    for name, (disp, fargs) in cases(args.size, np.random.default_rng(args.seed)).items():
        ref = disp.numpy_impl(*fargs)
        got = disp.numba_impl(*fargs)  # warm-up
        same = all(np.allclose(r, g, rtol=1e-9, atol=1e-12)
                   for r, g in zip(_tup(ref), _tup(got)))
        t_np = best_of(disp.numpy_impl, fargs, args.repeat)
        t_nb = best_of(disp.numba_impl, fargs, args.repeat)
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb,
                     "speedup": t_np / t_nb, "agree": bool(same)})

    if args.json:
        json.dump(rows, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        print(f"{'kernel':<16}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}  agree")
        for r in rows:
            print(f"{r['kernel']:<16}{r['numpy_ms']:>11.2f}{r['numba_ms']:>11.2f}"
                  f"{r['speedup']:>9.2f}  {r['agree']}")
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
