"""Time the numba and numpy backends of the integer kernels on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is warmed up once per backend (numba compiles on first call) and
the outputs of the two backends are checked for equality before timing.
"""
import argparse
import json
import platform
import sys
import time

import numpy as np

from mspquant import _accel, kernels
from mspquant.quantizers import QuantScheme, build_levels


def cases(rng):
    lv = build_levels(QuantScheme.spot(6, 3, 2)).levels
    x = rng.uniform(-1.2, 1.2, 2_000_000)
    A = rng.integers(0, 16, size=(256, 576))
    sh1 = rng.integers(-1, 8, size=(64, 576))
    sh2 = rng.integers(-1, 8, size=(64, 576))
    neg = rng.random((64, 576)) < 0.5
    K = rng.integers(-127, 128, size=(64, 576))
    return {
        "nearest_index (2M values, 63 levels)": (kernels.nearest_index, (lv, x)),
        "shift_accumulate (256x576 @ 64 rows)": (kernels.shift_accumulate, (A, sh1, sh2, neg)),
        "int_accumulate (256x576 @ 64 rows)": (kernels.int_accumulate, (A, K)),
    }


def best_time(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    args = p.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    rows = []
    prev = _accel.get_backend()
    try:
        for name, (fn, fargs) in cases(rng).items():
            out = {}
            secs = {}
            for backend in ("numba", "numpy"):
                _accel.set_backend(backend)
                out[backend] = fn(*fargs)  # warm-up / compile
                secs[backend] = best_time(fn, fargs, args.repeat)
            same = bool(np.array_equal(out["numba"], out["numpy"]))
            rows.append({"kernel": name, "numba_s": secs["numba"], "numpy_s": secs["numpy"],
                         "speedup": secs["numpy"] / secs["numba"], "identical": same})
    finally:
        _accel.set_backend(prev)
    print(f"{'kernel':40s} {'numba ms':>10s} {'numpy ms':>10s} {'numpy/numba':>12s}  identical")
    for r in rows:
        print(f"{r['kernel']:40s} {1e3 * r['numba_s']:10.2f} {1e3 * r['numpy_s']:10.2f} {r['speedup']:12.2f}  {r['identical']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"python": platform.python_version(), "rows": rows}, f, indent=2)
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
