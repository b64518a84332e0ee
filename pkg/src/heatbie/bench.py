"""Benchmarks: summation scaling and per-step cost vs boundary resolution.

    python -m heatbie.bench summation [--sizes ...]
    python -m heatbie.bench step configs/example2.ini [--n 128 256 512]

Results are appended to ``bench/results/*.csv`` together with a machine
identifier; compare rows only within one machine.
"""
from __future__ import annotations

import argparse
import csv
import platform
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .fast_summation import KernelSpec, sum_direct, sum_hierarchical

RESULTS = Path("bench/results")


@dataclass
class BenchmarkRecord:
    case: str
    n: int
    backend: str
    seconds: float
    max_rel_error: float | None = None
    machine: str = ""


def machine_id():
    return f"{platform.node()}-{platform.machine()}-{platform.python_version()}"


def scaling_exponent(ns, seconds):
    """Slope of log(time) against log(N)."""
    return float(np.polyfit(np.log(ns), np.log(seconds), 1)[0])


def _points(n, seed):
    rng = np.random.default_rng(seed)
    return rng.random((n, 2)), rng.random((n, 2)), rng.random(n)


def bench_summation(sizes, alpha=0.01, tol=1e-8, direct_cap=8000, check_size=1000, seed=0,
                    repeats=1):
    """Time hierarchical (all sizes) and direct (sizes <= cap) K0 sums.

    Sources and targets are N uniform random points each.  The
    hierarchical timing includes building the plan.  Returns
    (records, exponents by backend).
    """
    sizes = sorted(int(n) for n in sizes)
    kernel = KernelSpec("K0", alpha)
    mid = machine_id()
    recs = []
    # accuracy spot check at a small size
    s, t, q = _points(check_size, seed)
    ref = sum_direct(s, t, kernel, q)
    err = float(np.max(np.abs(sum_hierarchical(s, t, kernel, q, tol=tol) - ref) / np.abs(ref)))
    recs.append(BenchmarkRecord("accuracy", check_size, "hierarchical", 0.0, err, mid))
    sum_hierarchical(s[:300], t[:300], kernel, q[:300], tol=tol)  # compile
    for n in sizes:
        s, t, q = _points(n, seed + n)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            sum_hierarchical(s, t, kernel, q, tol=tol)
            best = min(best, time.perf_counter() - t0)
        recs.append(BenchmarkRecord("K0 random", n, "hierarchical", best, None, mid))
        if n <= direct_cap:
            t0 = time.perf_counter()
            sum_direct(s, t, kernel, q)
            recs.append(BenchmarkRecord("K0 random", n, "direct", time.perf_counter() - t0,
                                        None, mid))
    exps = {}
    for backend in ("hierarchical", "direct"):
        rows = [r for r in recs if r.backend == backend and r.case == "K0 random"]
        if len(rows) >= 2:
            exps[backend] = scaling_exponent([r.n for r in rows], [r.seconds for r in rows])
    return recs, exps


def bench_step(cfg, n_list, steps=2):
    """Run ``steps`` steps per boundary resolution; record iterations and
    stage times of the last step (operator set-up is excluded).

    ``cfg`` is a cli RunConfig; ``n_list`` are nodes per curve (N_Gamma = n per curve, summed).
    """
    from .cli import build
    from .time_stepper import advance

    out = []
    for n in n_list:
        c = replace(cfg, n=int(n))
        stepper, scheme, state, _, _ = build(c)
        state = advance(state, scheme, stepper, steps)
        info = state.info["last"]
        boundary = sum(info.timings.get(k, 0.0) for k in ("boundary_potential", "gmres", "layer"))
        out.append(dict(n_gamma=int(n) * len(c.curves), n_per_curve=int(n),
                        gmres_iterations=info.gmres_iterations, leaves=info.leaves,
                        boundary_seconds=boundary, step_seconds=sum(info.timings.values()),
                        machine=machine_id()))
    return out


def append_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [asdict(r) if isinstance(r, BenchmarkRecord) else r for r in rows]
    if not rows:
        return path
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        if new:
            w.writeheader()
        w.writerows(rows)
    return path


def main(argv=None):
    p = argparse.ArgumentParser(prog="python -m heatbie.bench")
    sub = p.add_subparsers(dest="what", required=True)
    s = sub.add_parser("summation")
    s.add_argument("--sizes", type=int, nargs="+",
                   default=[1000, 2000, 4000, 8000, 25_000, 50_000, 100_000, 200_000, 400_000])
    s.add_argument("--alpha", type=float, default=0.01)
    st = sub.add_parser("step")
    st.add_argument("config")
    st.add_argument("--n", type=int, nargs="+", default=[128, 256, 512])
    p.add_argument("--out", default=str(RESULTS))
    args = p.parse_args(argv)
    if args.what == "summation":
        recs, exps = bench_summation(args.sizes, args.alpha)
        for r in recs:
            print(f"{r.case:12s} {r.backend:12s} N={r.n:8d} {r.seconds:9.3f}s"
                  + ("" if r.max_rel_error is None else f" err={r.max_rel_error:.2e}"))
        big = [r for r in recs if r.backend == "hierarchical" and r.n >= 25_000]
        if len(big) >= 2:
            exps["hierarchical (N >= 2.5e4)"] = scaling_exponent([r.n for r in big],
                                                                 [r.seconds for r in big])
        for k, v in exps.items():
            print(f"exponent {k}: {v:.3f}")
        append_csv(Path(args.out) / "summation.csv", recs)
    else:
        from .cli import load_config

        rows = bench_step(load_config(args.config), args.n)
        for r in rows:
            print(r)
        append_csv(Path(args.out) / "step.csv", rows)


if __name__ == "__main__":
    main()
