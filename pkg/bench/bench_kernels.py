"""Benchmark the compiled assembly kernels against the NumPy fallback.

The kernel backend is chosen at import time, so each backend is timed in
a fresh subprocess (CELLMECH_PURE_PYTHON=1 forces the fallback).  Timed
operations are the per-patch assembly entry points on a 3x3-cell system
plus one full equilibrium solve.

Usage: python3 bench/bench_kernels.py [--repeat K]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_worker(repeat):
    import numpy as np

    from cellmech import kernels
    from cellmech.geometry import default_params, make_layout
    from cellmech.harness.train import build_system
    from cellmech.mechanics import Material
    from cellmech.solver import SolveSettings, newton_solve

    layout = make_layout(3, 3, preset="squeeze_lr")
    system = build_system(layout, default_params(layout), Material())
    rng = np.random.default_rng(0)
    q = system.X_global + 0.01 * rng.standard_normal(system.X_global.shape)

    res = {"backend": kernels.get_backend()}
    res["energy"] = _time(lambda: system.energy(q), repeat)
    res["residual"] = _time(lambda: system.residual(q), repeat)
    res["hessian"] = _time(lambda: system.hessian(q), repeat)

    lam_glob = rng.standard_normal((system.dofmap.n_groups, 2))
    lam_glob.ravel()[system.dofmap.constrained] = 0.0
    res["mixed_vjp"] = _time(lambda: system.mixed_vjp(q, lam_glob), repeat)

    a = np.array([0.25, -0.2])
    res["newton_solve"] = _time(
        lambda: newton_solve(system, a, SolveSettings(initial_increments=2)),
        max(repeat // 2, 1))
    print(json.dumps(res))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        run_worker(args.repeat)
        return

    rows = {}
    for pure in ("0", "1"):
        env = dict(os.environ, CELLMECH_PURE_PYTHON=pure)
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--worker",
             "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True, check=True)
        rec = json.loads(out.stdout.splitlines()[-1])
        rows[rec.pop("backend")] = rec

    names = sorted(next(iter(rows.values())))
    print("%-14s %12s %12s %9s" % ("operation", "cython [ms]", "numpy [ms]",
                                   "speedup"))
    for name in names:
        cy = rows.get("cython", {}).get(name)
        np_t = rows["numpy"][name]
        if cy is None:
            print("%-14s %12s %12.3f %9s" % (name, "n/a", 1e3 * np_t, "n/a"))
        else:
            print("%-14s %12.3f %12.3f %8.1fx" % (
                name, 1e3 * cy, 1e3 * np_t, np_t / cy))


if __name__ == "__main__":
    main()
