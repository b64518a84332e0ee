"""IMEX time stepping: each step is one screened elliptic solve.

Backward Euler        u^{N+1} - dt eps Lap u^{N+1}     = u^N + dt F^N
Extrapolated Gear     u^{N+1} - 2/3 dt eps Lap u^{N+1} = 4/3 u^N - 1/3 u^{N-1}
                                                         + 4/3 dt F^N - 2/3 dt F^{N-1}

so alpha^2 = eps dt (Euler) or 2/3 eps dt (Gear).  The solve splits into a
volume potential of the extended right-hand side plus a double-layer
correction that fixes the boundary values.
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .boundary_integral import BoundaryOperator, LayerEvaluator, build_rhs
from .geometry import CurveSet
from .linear_solver import gmres
from .quadtree import QuadTree, build_tree, uniform_tree
from .special import DomainError, bessel_first_second
from .volume_potential import ScreenedKernel, VolumePotential, moment_tables

log = logging.getLogger(__name__)


class Scheme(str, enum.Enum):
    IMEX_EULER = "euler"
    EXTRAP_GEAR = "gear"


class BootstrapRequiredError(RuntimeError):
    """Gear needs two history levels; run :func:`bootstrap_gear` first."""


class StepError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# combination coefficients: (u weights, F weights) newest first, alpha^2 factor
_COEFFS = {
    Scheme.IMEX_EULER: ((1.0,), (1.0,), 1.0),
    Scheme.EXTRAP_GEAR: ((4.0 / 3.0, -1.0 / 3.0), (4.0 / 3.0, -2.0 / 3.0), 2.0 / 3.0),
}


@dataclass(frozen=True)
class SchemeConfig:
    scheme: Scheme
    dt: float
    epsilon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def alpha2(self):
        return self.epsilon * _COEFFS[self.scheme][2] * self.dt

    @property
    def alpha(self):
        return float(np.sqrt(self.alpha2))

    @property
    def levels(self):
        return len(_COEFFS[self.scheme][0])


@dataclass
class Problem:
    """Domain, Dirichlet data and forcing.

    ``boundary[k]`` is a constant or a callable ``f(points, t)`` for curve
    k.  ``forcing`` is ``F(points, t, u)`` (u = values of the current field
    at the points) or None.
    """

    curves: CurveSet
    boundary: Sequence
    forcing: Callable | None = None
    epsilon: float = 1.0
    name: str = "custom"

    def boundary_values(self, k, points, t):
        f = self.boundary[k]
        if callable(f):
            return np.asarray(f(points, t), dtype=float)
        return np.full(len(points), float(f))

    def boundary_constant(self, k, t):
        """Value used outside Omega next to curve k (mean of the data)."""
        c = self.curves.curves[k]
        return float(np.mean(self.boundary_values(k, c.nodes.T, t)))


@dataclass
class Discretization:
    tau: float = 1e-7
    max_level: int = 10
    min_level: int = 3
    uniform_level: int | None = None
    alpert_order: int = 10
    gmres_tol: float = 1e-10
    gmres_max_iter: int = 200
    backend: str = "hierarchical"
    fmm_tol: float = 1e-10
    max_leaves: int = 400_000
    extension: str = "trace_mean"  # or "dirichlet"

    def __post_init__(self):
        if self.extension not in ("trace_mean", "dirichlet"):
            raise ValueError("extension must be 'trace_mean' or 'dirichlet'")


@dataclass
class TimeState:
    """u^N (and older levels) as trees with grid values, newest first."""

    step: int
    time: float
    history: list
    info: dict = field(default_factory=dict)

    @property
    def u(self) -> QuadTree:
        return self.history[0]


@dataclass
class StepInfo:
    gmres_iterations: int
    gmres_residual: float
    leaves: int
    timings: dict


class Stepper:
    """Runs steps for one problem; caches operators across steps."""

    def __init__(self, problem: Problem, disc: Discretization = Discretization()):
        self.problem = problem
        self.disc = disc
        self._ops = {}
        self._plans = {}

    # -- cached pieces ---------------------------------------------------------
    def boundary_operator(self, alpha):
        key = round(alpha, 15)
        if key not in self._ops:
            op = BoundaryOperator(self.problem.curves, alpha, self.disc.alpert_order)
            A = op.dense()
            self._ops[key] = (op, A)
        return self._ops[key]

    def _plan(self, tree, alpha):
        key = (tree.signature(), round(alpha, 15))
        plan = self._plans.get(key)
        if plan is None:
            if len(self._plans) > 4:
                self._plans.clear()
            pts = tree.grid_points()
            comp = self.problem.curves.component(pts, tol=None)
            inside = np.flatnonzero(comp < 0)
            kernel = ScreenedKernel(alpha)
            vp = VolumePotential(tree, kernel, self.disc.backend, self.disc.fmm_tol,
                                 moment_tables(alpha))
            layer = LayerEvaluator(self.problem.curves, alpha, pts[inside], near="interpolate",
                                   tol=self.disc.fmm_tol)
            plan = self._plans[key] = dict(vp=vp, layer=layer, comp=comp, inside=inside)
        return plan

    # -- fields ------------------------------------------------------------------
    def initial_state(self, u0, t0=0.0) -> TimeState:
        """State from a callable u0(points) on Omega or from a ready tree."""
        if isinstance(u0, QuadTree):
            return TimeState(0, t0, [u0])
        consts = [self.problem.boundary_constant(k, t0) for k in range(len(self.problem.curves))]
        field_fn = self._extended(u0, consts)
        tree = self._tree(field_fn)
        return TimeState(0, t0, [tree])

    def _extended(self, fn, consts):
        curves = self.problem.curves

        def ext(points):
            comp = curves.component(points, tol=None)
            out = np.empty(len(points))
            om = comp < 0
            if np.any(om):
                out[om] = fn(points[om])
            for k, c in enumerate(consts):
                out[comp == k] = c
            return out

        return ext

    def _tree(self, field_fn):
        d = self.disc
        if d.uniform_level is not None:
            tree = uniform_tree(d.uniform_level)
            return tree.set_values(field_fn(tree.grid_points()).reshape(tree.n_leaves, 16))
        return build_tree(lambda x, y: field_fn(np.stack([x, y], axis=-1)), d.tau, d.max_level,
                          min_level=d.min_level, max_leaves=d.max_leaves)


def compute_B(state: TimeState, scheme: SchemeConfig, forcing=None):
    """The right-hand side B as a callable on points of Omega."""
    cu, cf, _ = _COEFFS[scheme.scheme]
    if len(state.history) < len(cu):
        raise BootstrapRequiredError(
            f"{scheme.scheme.value} needs {len(cu)} history levels, state has {len(state.history)}")
    dt = scheme.dt
    trees = state.history[:len(cu)]
    times = [state.time - k * dt for k in range(len(cu))]

    def B(points):
        points = np.atleast_2d(points)
        out = np.zeros(len(points))
        for a, b, tree, tk in zip(cu, cf, trees, times):
            u = tree.evaluate(points)
            out += a * u
            if forcing is not None:
                out += b * dt * np.asarray(forcing(points, tk, u), dtype=float)
        return out

    return B


def step(state: TimeState, scheme: SchemeConfig, stepper: Stepper) -> TimeState:
    """Advance one step; returns the new state (history shifted)."""
    problem = stepper.problem
    curves = problem.curves
    alpha = scheme.alpha
    t_new = state.time + scheme.dt
    timings = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except (BootstrapRequiredError, StepError):
            raise
        except Exception as exc:  # tag and propagate
            raise StepError(name, exc) from exc
        finally:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0

    B = compute_B(state, scheme, problem.forcing)
    nodes = [c.nodes.T for c in curves.curves]

    def extend():
        # constants outside Omega: mean trace of B on each curve keeps the
        # extension continuous when B|curve is constant (f + dt F(curve))
        if stepper.disc.extension == "dirichlet":
            consts = [problem.boundary_constant(k, t_new) for k in range(len(nodes))]
        else:
            consts = [float(np.mean(B(x))) for x in nodes]
        return consts, stepper._extended(B, consts)

    consts, Bext = stage("extend", extend)
    tree = stage("tree", lambda: stepper._tree(Bext))
    plan = stage("plan", lambda: stepper._plan(tree, alpha))
    up = stage("volume", lambda: plan["vp"](tree.coeffs))
    up_tree = tree.with_values(up)
    up_gamma = stage("boundary_potential", lambda: np.concatenate([up_tree.evaluate(x) for x in nodes]))
    f = np.concatenate([problem.boundary_values(k, x, t_new) for k, x in enumerate(nodes)])
    rhs = build_rhs(f, up_gamma, alpha)
    op, A = stage("operator", lambda: stepper.boundary_operator(alpha))
    sigma, report = stage("gmres", lambda: gmres(lambda v: A @ v, rhs, stepper.disc.gmres_tol,
                                                 stepper.disc.gmres_max_iter))
    if not report.converged:
        raise StepError("gmres", f"no convergence (residual {report.residual:.2e} "
                                 f"after {report.iterations} iterations)")
    g = f - up_gamma
    uh = stage("layer", lambda: plan["layer"](sigma, g))
    vals = np.empty(tree.n_leaves * 16)
    comp = plan["comp"]
    for k in range(len(curves)):
        vals[comp == k] = np.mean(problem.boundary_values(k, nodes[k], t_new))
    vals[plan["inside"]] = up.ravel()[plan["inside"]] + uh
    new_tree = tree.with_values(vals)
    info = StepInfo(report.iterations, report.residual, tree.n_leaves, timings)
    history = [new_tree, state.history[0]]  # Gear needs u^N and u^{N-1}
    log.info("step %d t=%.6g leaves=%d gmres=%d", state.step + 1, t_new, tree.n_leaves,
             report.iterations)
    return TimeState(state.step + 1, t_new, history, dict(last=info, sigma=sigma,
                                                         extension=consts))


def bootstrap_gear(state: TimeState, scheme: SchemeConfig, stepper: Stepper) -> TimeState:
    """First step of a Gear run: one backward Euler step of the same size."""
    euler = SchemeConfig(Scheme.IMEX_EULER, scheme.dt, scheme.epsilon)
    return step(TimeState(state.step, state.time, state.history[:1]), euler, stepper)


def advance(state, scheme: SchemeConfig, stepper: Stepper, n_steps, callback=None):
    """Take ``n_steps`` steps, bootstrapping Gear if needed."""
    for _ in range(n_steps):
        if scheme.scheme is Scheme.EXTRAP_GEAR and len(state.history) < 2:
            state = bootstrap_gear(state, scheme, stepper)
        else:
            state = step(state, scheme, stepper)
        if callback is not None:
            callback(state)
    return state


# ---------------------------------------------------------------- examples

EXAMPLE1_R = (0.1, 0.4)
EXAMPLE1_LAMBDA_GUESS = 10.24


def example1_forcing(center):
    c = np.asarray(center, dtype=float)

    def F(points, t, u=None):
        r = np.hypot(points[:, 0] - c[0], points[:, 1] - c[1])
        return 400.0 * np.cos(20 * r) + 20.0 * np.sin(20 * r) / r

    return F


def analytic_example1(x, t, lam):
    """Exact solution on the annulus 0.1 <= |x| <= 0.4 (origin-centered)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.hypot(x[:, 0], x[:, 1])
    ri, ro = EXAMPLE1_R
    if np.any(r < ri * (1 - 1e-12)) or np.any(r > ro * (1 + 1e-12)):
        raise DomainError("point outside the annulus 0.1 <= |x| <= 0.4")
    j0 = lambda z: bessel_first_second("J0", z)
    y0 = lambda z: bessel_first_second("Y0", z)
    bracket = y0(ri * lam) * j0(lam * r) - j0(ri * lam) * y0(lam * r)
    out = np.exp(-lam * lam * t) * bracket + np.cos(20 * r)
    return out if out.size > 1 else float(out[0])
