"""Compare the numba and pure-numpy kernel backends.

Each backend runs in its own interpreter (the backend is fixed at import
time by OCGEOM_BACKEND).  Timings are the best of several repeats, taken
after one warm-up call so JIT compilation is excluded.

    python3 benchmarks/bench_kernels.py [--rows 20000] [--steps 2000] [--repeat 5]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def measure(rows: int, steps: int, repeat: int) -> dict:
    import numpy as np

    from ocgeom import _accel
    from ocgeom.pontryagin import build_hamiltonian, morse_matrix
    from ocgeom.problems import load_example
    from ocgeom.solver import integrate_hamilton

    out = {"backend": _accel.backend()}
    rng = np.random.default_rng(0)
    for name in ("pendulum", "bang_bang", "overactuated"):
        h = build_hamiltonian(load_example(name))
        X = rng.uniform(-1.5, 1.5, (rows, 2 * h.n + h.m))
        mm = morse_matrix(h)
        out[f"morse batch {name}"] = _best(lambda: mm.evaluate_batch(X), repeat)
    for name in ("train", "pendulum"):
        prob = load_example(name)
        h = build_hamiltonian(prob)
        p0 = np.full(h.n, -0.5)
        out[f"rk4 {name}"] = _best(
            lambda: integrate_hamilton(h, prob.q0, p0, prob.t0, prob.tf, steps), repeat
        )
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        print(json.dumps(measure(args.rows, args.steps, args.repeat)))
        return 0

    results = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, OCGEOM_BACKEND=backend)
        cmd = [sys.executable, __file__, "--child", "--rows", str(args.rows),
               "--steps", str(args.steps), "--repeat", str(args.repeat)]
        res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        results[backend] = json.loads(res.stdout.strip().splitlines()[-1])

    print(f"rows={args.rows} steps={args.steps} repeat={args.repeat}")
    print(f"{'kernel':<28}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for key in results["numba"]:
        if key == "backend":
            continue
        a, b = results["numba"][key], results["numpy"][key]
        print(f"{key:<28}{1e3 * a:>12.2f}{1e3 * b:>12.2f}{b / a:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
