"""Wall-clock comparison of the compiled round kernel against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--t-max 5000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from metastab import kernels
from metastab.losses import ConstraintSet, RegularizedQuadratic
from metastab.task_model import generate_collection
from metastab.trainer import TrainerConfig, maml_train

CASES = [  # (m, n, k, b, r)
    (5, 25, 5, 10, 1),
    (20, 50, 5, 10, 5),
    (40, 200, 10, 20, 10),
]


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t-max", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if "cython" not in kernels.BACKENDS:
        print("compiled kernel unavailable; only the fallback can run")
        return 1
    loss = RegularizedQuadratic(0.01)
    print(f"{'m':>4} {'n':>4} {'k':>3} {'b':>3} {'r':>3} {'cython s':>10} {'python s':>10} {'speedup':>8} {'max |dw|':>10}")
    for m, n, k, b, r in CASES:
        coll = generate_collection(0, 10, m, n, "similar", 0.2, 0.1)
        times, outs = {}, {}
        for backend in ("cython", "python"):
            cfg = TrainerConfig(m=m, n=n, k=k, b=b, r=r, t_max=args.t_max, alpha=0.1, beta_cap=0.02,
                                constraint=ConstraintSet(10.0), trace_loss=False, backend=backend)
            times[backend], outs[backend] = _time(lambda: maml_train(coll, cfg, loss), args.repeat)
        diff = np.max(np.abs(outs["cython"].averaged_iterate - outs["python"].averaged_iterate))
        print(f"{m:>4} {n:>4} {k:>3} {b:>3} {r:>3} {times['cython']:>10.4f} {times['python']:>10.4f} "
              f"{times['python'] / times['cython']:>7.1f}x {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
