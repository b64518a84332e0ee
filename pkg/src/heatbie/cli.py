"""Command-line driver: ``heatbie run | study | verify``.

Configs are INI files::

    [problem]
    forcing = example1          ; none | example1 | allen_cahn
    initial = example1          ; example1 | constant | random
    initial_value = 0.0
    epsilon = 1.0
    seed = 0
    offset = 0.0, 0.0

    [curve.0]
    family = circle             ; circle | ellipse
    center = 0.5, 0.5
    radius = 0.4
    boundary = 0.0              ; a number or "example1"

    [discretization]
    n = 256
    tau = 1e-7
    ...

    [stepping]
    scheme = euler
    dt = 1e-3
    t_final = 1e-2              ; or: steps = 10
    snapshot_stride = 1

    [output]
    directory = out

Exit codes: 0 ok, 2 config error, 3 solver failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("heatbie")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class UnsupportedStudyError(ConfigError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class CurveConfig:
    family: str
    center: tuple
    radius: float | None = None
    axes: tuple | None = None
    rotation: float = 0.0
    boundary: str = "0.0"


@dataclass
class RunConfig:
    curves: list
    forcing: str = "none"
    initial: str = "constant"
    initial_value: float = 0.0
    epsilon: float = 1.0
    seed: int = 0
    offset: tuple = (0.0, 0.0)
    n: int = 256
    tau: float = 1e-7
    max_level: int = 10
    min_level: int = 3
    uniform_level: int | None = None
    alpert_order: int = 10
    gmres_tol: float = 1e-10
    backend: str = "hierarchical"
    fmm_tol: float = 1e-10
    extension: str = "trace_mean"
    scheme: str = "euler"
    dt: float = 1e-3
    t_final: float | None = None
    steps: int | None = None
    snapshot_stride: int = 1
    directory: str = "heatbie_out"
    formats: str = "csv"

    @property
    def n_steps(self):
        if self.steps is not None:
            return self.steps
        return int(round(self.t_final / self.dt))


_PROBLEM_KEYS = dict(forcing=str, initial=str, initial_value=float, epsilon=float, seed=int,
                     offset="pair")
_DISC_KEYS = dict(n=int, tau=float, max_level=int, min_level=int, uniform_level="optint",
                  alpert_order=int, gmres_tol=float, backend=str, fmm_tol=float, extension=str)
_STEP_KEYS = dict(scheme=str, dt=float, t_final="optfloat", steps="optint", snapshot_stride=int)
_OUT_KEYS = dict(directory=str, formats=str)
_CURVE_KEYS = dict(family=str, center="pair", radius="optfloat", axes="pair", rotation=float,
                   boundary=str)


def _convert(section, key, raw, kind):
    try:
        if kind == "pair":
            vals = tuple(float(v) for v in raw.split(","))
            if len(vals) != 2:
                raise ValueError("expected two comma-separated numbers")
            return vals
        if kind in ("optint", "optfloat"):
            if raw.strip().lower() in ("", "none"):
                return None
            return int(raw) if kind == "optint" else float(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def _read_section(cp, name, keys, out, required=()):
    if not cp.has_section(name):
        if required:
            raise ConfigError(f"missing section [{name}]")
        return
    for key, raw in cp.items(name):
        if key not in keys:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        out[key] = _convert(name, key, raw, keys[key])
    for key in required:
        if key not in out:
            raise ConfigError(f"[{name}] missing required key {key!r}")


def parse_config(text, source="<config>"):
    """RunConfig from INI text; errors carry the section/key or line."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {"problem", "discretization", "stepping", "output"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("curve."):
            raise ConfigError(f"unknown section [{sec}]")
    kw = {}
    _read_section(cp, "problem", _PROBLEM_KEYS, kw)
    _read_section(cp, "discretization", _DISC_KEYS, kw)
    _read_section(cp, "stepping", _STEP_KEYS, kw)
    _read_section(cp, "output", _OUT_KEYS, kw)
    names = sorted((s for s in cp.sections() if s.startswith("curve.")),
                   key=lambda s: _curve_index(s))
    curves = []
    for i, name in enumerate(names):
        if _curve_index(name) != i:
            raise ConfigError(f"curve sections must be numbered 0, 1, ...; got [{name}]")
        ck = {}
        _read_section(cp, name, _CURVE_KEYS, ck, required=("family", "center"))
        curves.append(CurveConfig(**ck))
    cfg = RunConfig(curves=curves, **kw)
    validate(cfg)
    return cfg


def _curve_index(name):
    try:
        return int(name.split(".", 1)[1])
    except ValueError:
        raise ConfigError(f"bad curve section name [{name}]") from None


def load_config(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text(), str(p))


def validate(cfg: RunConfig):
    if not cfg.curves:
        raise ConfigError("no curves defined (need [curve.0], the outer boundary)")
    for i, c in enumerate(cfg.curves):
        if c.family == "circle":
            if c.radius is None or c.radius <= 0:
                raise ConfigError(f"[curve.{i}] circle needs radius > 0")
        elif c.family == "ellipse":
            if c.axes is None or min(c.axes) <= 0:
                raise ConfigError(f"[curve.{i}] ellipse needs axes > 0")
        else:
            raise ConfigError(f"[curve.{i}] unknown family {c.family!r}")
        if c.boundary != "example1":
            try:
                float(c.boundary)
            except ValueError:
                raise ConfigError(f"[curve.{i}] boundary must be a number or 'example1'") from None
    for name in ("tau", "gmres_tol", "fmm_tol", "dt", "epsilon"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive")
    if cfg.t_final is None and cfg.steps is None:
        raise ConfigError("[stepping] needs t_final or steps")
    if cfg.forcing not in ("none", "example1", "allen_cahn"):
        raise ConfigError(f"[problem] unknown forcing {cfg.forcing!r}")
    if cfg.initial not in ("example1", "constant", "random"):
        raise ConfigError(f"[problem] unknown initial {cfg.initial!r}")
    if cfg.scheme not in ("euler", "gear"):
        raise ConfigError(f"[stepping] unknown scheme {cfg.scheme!r}")
    if cfg.backend not in ("hierarchical", "direct"):
        raise ConfigError(f"[discretization] unknown backend {cfg.backend!r}")
    if cfg.extension not in ("trace_mean", "dirichlet"):
        raise ConfigError(f"[discretization] unknown extension {cfg.extension!r}")
    if cfg.snapshot_stride < 0:
        raise ConfigError("snapshot_stride must be >= 0")
    if cfg.n % 2 or cfg.n < 16:
        raise ConfigError("[discretization] n must be even and >= 16")


def dump_config(cfg: RunConfig):
    """INI text with every default materialised (replays the run)."""
    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ", ".join(repr(float(x)) for x in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    d = asdict(cfg)
    lines = ["[problem]"] + [f"{k} = {fmt(d[k])}" for k in _PROBLEM_KEYS]
    for i, c in enumerate(d["curves"]):
        lines += ["", f"[curve.{i}]"] + [f"{k} = {fmt(v)}" for k, v in c.items()
                                         if v is not None]
    lines += ["", "[discretization]"] + [f"{k} = {fmt(d[k])}" for k in _DISC_KEYS]
    lines += ["", "[stepping]"] + [f"{k} = {fmt(d[k])}" for k in _STEP_KEYS]
    lines += ["", "[output]"] + [f"{k} = {fmt(d[k])}" for k in _OUT_KEYS]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ problems

def build(cfg: RunConfig):
    """(Stepper, SchemeConfig, initial state, lambda or None) for a config."""
    from .geometry import CurveSet, circle, ellipse
    from .special import find_lambda
    from .time_stepper import (EXAMPLE1_LAMBDA_GUESS, Discretization, Problem, SchemeConfig,
                               Stepper, analytic_example1, example1_forcing)

    off = np.asarray(cfg.offset)
    curves = []
    for i, c in enumerate(cfg.curves):
        center = tuple(np.asarray(c.center) + off)
        if c.family == "circle":
            curves.append(circle(i, cfg.n, center, c.radius))
        else:
            curves.append(ellipse(i, cfg.n, center, c.axes, c.rotation))
    try:
        cs = CurveSet(curves)
    except ValueError as exc:
        raise ConfigError(f"invalid geometry: {exc}") from None
    center = np.asarray(cfg.curves[0].center) + off
    lam = None
    needs_example1 = cfg.forcing == "example1" or cfg.initial == "example1" or any(
        c.boundary == "example1" for c in cfg.curves)
    if needs_example1:
        lam = find_lambda(0.1, 0.4, EXAMPLE1_LAMBDA_GUESS)

    boundary = []
    for c in cfg.curves:
        if c.boundary == "example1":
            r = c.radius if c.family == "circle" else None
            if r is None:
                raise ConfigError("boundary = example1 needs a circle")
            boundary.append(float(np.cos(20 * r)))
        else:
            boundary.append(float(c.boundary))

    if cfg.forcing == "example1":
        forcing = example1_forcing(center)
    elif cfg.forcing == "allen_cahn":
        forcing = allen_cahn_forcing
    else:
        forcing = None
    problem = Problem(cs, boundary, forcing, cfg.epsilon, name=cfg.forcing)
    disc = Discretization(tau=cfg.tau, max_level=cfg.max_level, min_level=cfg.min_level,
                          uniform_level=cfg.uniform_level, alpert_order=cfg.alpert_order,
                          gmres_tol=cfg.gmres_tol, backend=cfg.backend, fmm_tol=cfg.fmm_tol,
                          extension=cfg.extension)
    stepper = Stepper(problem, disc)
    scheme = SchemeConfig(cfg.scheme, cfg.dt, cfg.epsilon)

    if cfg.initial == "example1":
        state = stepper.initial_state(lambda p: analytic_example1(p - center, 0.0, lam))
    elif cfg.initial == "constant":
        v = cfg.initial_value
        state = stepper.initial_state(lambda p: np.full(len(p), v))
    else:
        state = random_initial_state(stepper, cfg.seed)
    return stepper, scheme, state, lam, center


def allen_cahn_forcing(points, t, u):
    return u * (1.0 - u * u)


def random_initial_state(stepper, seed):
    """Uniform [-1/2, 1/2] draws at the grid points of Omega (seeded)."""
    from .time_stepper import TimeState

    d = stepper.disc
    if d.uniform_level is None:
        raise ConfigError("initial = random needs [discretization] uniform_level")
    from .quadtree import uniform_tree

    tree = uniform_tree(d.uniform_level)
    pts = tree.grid_points()
    comp = stepper.problem.curves.component(pts, tol=None)
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-0.5, 0.5, len(pts))
    for k in range(len(stepper.problem.curves)):
        vals[comp == k] = stepper.problem.boundary_constant(k, 0.0)
    return TimeState(0, 0.0, [tree.set_values(vals.reshape(-1, 16))])


# ------------------------------------------------------------------ outputs

def write_snapshot(path, tree):
    pts = tree.grid_points()
    data = np.column_stack([pts, tree.grid_levels(), tree.values.ravel()])
    np.savetxt(path, data, delimiter=",", header="x,y,level,value", comments="",
               fmt=["%.17g", "%.17g", "%d", "%.17g"])


def example1_error(state, curves, lam, center):
    """Max error over Omega grid points at least 5 h |y'| from the boundary."""
    from .time_stepper import analytic_example1

    tree = state.u
    pts = tree.grid_points()
    om = curves.component(pts, tol=None) < 0
    d, cid, _ = curves.nearest(pts[om])
    safe_dist = np.array([5 * c.h * g.speed.max() for c, g in zip(curves.curves, curves.geometry)])
    safe = d >= safe_dist[np.maximum(cid, 0)]
    exact = analytic_example1(pts[om][safe] - center, state.time, lam)
    return float(np.max(np.abs(tree.values.ravel()[om][safe] - exact)))


def run(cfg: RunConfig, out_dir=None, progress=None):
    """Execute the time loop and write all artifacts; returns the summary."""
    from .time_stepper import advance

    out = Path(out_dir or cfg.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    stepper, scheme, state, lam, center = build(cfg)
    n_steps = cfg.n_steps
    totals = {}
    iters = 0
    t0 = time.perf_counter()
    log_path = out / "run_log.jsonl"
    with open(log_path, "w") as logf:
        def record(st):
            nonlocal iters
            info = st.info["last"]
            iters += info.gmres_iterations
            for k, v in info.timings.items():
                totals[k] = totals.get(k, 0.0) + v
            rec = dict(step=st.step, time=st.time, gmres_iterations=info.gmres_iterations,
                       gmres_residual=info.gmres_residual, leaves=info.leaves,
                       timings=info.timings)
            if cfg.snapshot_stride and st.step % cfg.snapshot_stride == 0:
                name = f"step_{st.step:06d}.csv"
                write_snapshot(out / name, st.u)
                rec["snapshot"] = name
            logf.write(json.dumps(rec) + "\n")
            logf.flush()
            if progress:
                progress(rec)

        state = advance(state, scheme, stepper, n_steps, callback=record)
    vals = state.u.values.ravel()
    om = stepper.problem.curves.component(state.u.grid_points(), tol=None) < 0
    summary = dict(steps=state.step, final_time=state.time,
                   max_value=float(vals[om].max()), min_value=float(vals[om].min()),
                   gmres_iterations_total=iters, stage_seconds=totals,
                   wall_seconds=time.perf_counter() - t0)
    if lam is not None and cfg.forcing == "example1" and cfg.initial == "example1":
        summary["example1_error"] = example1_error(state, stepper.problem.curves, lam, center)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def convergence_study(cfg: RunConfig, dts, out_dir=None, scheme=None):
    """Example 1 error vs dt; returns (rows, order or None)."""
    from dataclasses import replace

    from .time_stepper import advance

    if cfg.forcing != "example1" or cfg.initial != "example1":
        raise UnsupportedStudyError("convergence studies need the example1 problem "
                                    "(forcing = example1, initial = example1)")
    if scheme is not None:
        cfg = replace(cfg, scheme=scheme)
    from .time_stepper import SchemeConfig

    t_final = cfg.t_final if cfg.t_final is not None else cfg.steps * cfg.dt
    stepper, _, state0, lam, center = build(cfg)
    rows = []
    for dt in dts:
        dt = float(dt)
        n = int(round(t_final / dt))
        t0 = time.perf_counter()
        state = advance(state0, SchemeConfig(cfg.scheme, dt, cfg.epsilon), stepper, n)
        err = example1_error(state, stepper.problem.curves, lam, center)
        rows.append(dict(dt=dt, steps=n, error=err, seconds=time.perf_counter() - t0))
        log.info("dt=%g error=%.3e", dt, err)
    order = None
    if len(rows) >= 2:
        order = float(np.polyfit(np.log([r["dt"] for r in rows]),
                                 np.log([r["error"] for r in rows]), 1)[0])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["dt,steps,error,seconds"] + [
            f"{r['dt']!r},{r['steps']},{r['error']!r},{r['seconds']:.2f}" for r in rows]
        lines.append(f"# order,{'n/a' if order is None else repr(order)}")
        (out / f"study_{cfg.scheme}.csv").write_text("\n".join(lines) + "\n")
    return rows, order


# ------------------------------------------------------------------ main

def _set_threads(n):
    """Pin BLAS/OpenMP pools to one thread and size the numba pool to ``n``
    (0 = numba default).

    Multithreaded BLAS splits dot-product reductions by thread count, which
    changes the last bits of the dense products; keeping BLAS serial makes
    output bitwise independent of ``--threads``.
    """
    import numba
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
    if n and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (0 = auto)")
    common.add_argument("--output-dir", default=argparse.SUPPRESS,
                        help="overrides [output] directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="overrides [problem] seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="heatbie", parents=[common],
                                description="Heat-equation solver based on integral equations.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run a simulation")
    r.add_argument("config")
    s = sub.add_parser("study", parents=[common], help="temporal convergence study (Example 1)")
    s.add_argument("config")
    s.add_argument("--scheme", choices=("euler", "gear"), default=None)
    s.add_argument("--dt", nargs="+", required=True,
                   help="time steps (space or comma separated)")
    v = sub.add_parser("verify", parents=[common], help="run an oracle suite")
    v.add_argument("suite")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    for name, default in (("threads", 0), ("output_dir", None), ("seed", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        from .verify import UnknownSuiteError, run_suite

        try:
            checks = run_suite(args.suite)
        except UnknownSuiteError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for c in checks:
            print(c.line())
        return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY

    from dataclasses import replace

    from .time_stepper import StepError

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.output_dir is not None:
            cfg = replace(cfg, directory=args.output_dir)
        if args.command == "run":
            summary = run(cfg, progress=(lambda r: print(
                f"step {r['step']} t={r['time']:.6g} gmres={r['gmres_iterations']} "
                f"leaves={r['leaves']}")) if args.verbose else None)
            print(json.dumps(summary, indent=2))
        else:
            dts = [float(x) for item in args.dt for x in item.split(",") if x.strip()]
            rows, order = convergence_study(cfg, dts, cfg.directory, args.scheme)
            print("dt,steps,error")
            for r in rows:
                print(f"{r['dt']:g},{r['steps']},{r['error']:.4e}")
            print(f"order: {'n/a' if order is None else f'{order:.3f}'}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StepError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
