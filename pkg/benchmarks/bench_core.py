"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_core.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import timeit

import numpy as np

from safeode import _pycore

try:
    from safeode import _core
except ImportError:  # extension not built
    _core = None


def cases(rng):
    obs = np.array([0.0, 0.0, 5.0, 0.0, 6.0, 0.0])
    z = np.array([-20.0, 1.0, 0.05, 10.0, 0.01, 0.5])
    Z = np.column_stack([rng.uniform(-30, -10, 20), rng.uniform(-2, 8, 20), rng.uniform(-0.2, 0.2, 20),
                         rng.uniform(6, 12, 20), rng.uniform(-0.1, 0.1, 20), rng.uniform(-1, 1, 20)])
    OBS = np.tile(obs, (20, 1))
    A = rng.normal(size=(5, 2))
    c = rng.normal(size=5)
    y = rng.normal(size=2)
    Y = rng.normal(size=(20, 2))
    AB = rng.normal(size=(20, 5, 2))
    CB = rng.normal(size=(20, 5))
    U = rng.uniform(-0.3, 0.3, size=(20, 2)) * np.array([1.0, 10.0])
    s0 = z[:4].copy()
    return {
        "qp_solve (m=5)": lambda m: m.qp_solve(y, A, c, 1e-10, 100),
        "qp_solve_batch (B=20)": lambda m: m.qp_solve_batch(Y, AB, CB, 1e-10, 100),
        "bicycle_row": lambda m: m.bicycle_row(z, 0.3, obs, 2.0, 1.0, 1.0, 1.0),
        "bicycle_row_batch (B=20)": lambda m: m.bicycle_row_batch(Z, 0.3, OBS, 2.0, 1.0, 1.0, 1.0),
        "lidar_scan (100 rays)": lambda m: m.lidar_scan(-20.0, 1.0, 0.05, 0.0, 0.0, 0.0, 4.5, 2.0, 100, 50.0),
        "shoot_cost_grad (H=20)": lambda m: m.shoot_cost_grad(U, s0, 0.0, obs, 0.1, 2.0, 10.0, 1.0, 10.0, 6.0,
                                                               10.0, 1e3, 0.1),
    }


def bench(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    rows = []
    for name, call in cases(np.random.default_rng(0)).items():
        t_py = bench(lambda: call(_pycore), args.repeat)
        t_c = bench(lambda: call(_core), args.repeat) if _core is not None else float("nan")
        rows.append({"kernel": name, "python_us": t_py * 1e6, "compiled_us": t_c * 1e6, "speedup": t_py / t_c})

    print(f"{'kernel':28s} {'python us':>12s} {'compiled us':>12s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:28s} {r['python_us']:12.2f} {r['compiled_us']:12.2f} {r['speedup']:8.1f}")
    if _core is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
