import numpy as np
import pytest

from heatbie.geometry import CurveSet, circle
from heatbie.special import DomainError, find_lambda
from heatbie.time_stepper import (EXAMPLE1_LAMBDA_GUESS, BootstrapRequiredError, Discretization,
                                  Problem, Scheme, SchemeConfig, StepError, Stepper, TimeState,
                                  advance, analytic_example1, bootstrap_gear, compute_B,
                                  example1_forcing, step)

C = np.array([0.5, 0.5])
LAM = find_lambda(0.1, 0.4, EXAMPLE1_LAMBDA_GUESS)


def annulus(n=128):
    return CurveSet([circle(0, n, C, 0.4), circle(1, n, C, 0.1)])


def const_stepper(value, forcing=None, epsilon=1.0, level=5, **kw):
    prob = Problem(annulus(), [value, value], forcing, epsilon)
    return Stepper(prob, Discretization(uniform_level=level, **kw))


def safe_mask(tree, alpha):
    pts = tree.grid_points()
    comp = annulus().component(pts, tol=None)
    return (comp < 0) & np.all((pts >= 10 * alpha) & (pts <= 1 - 10 * alpha), axis=1)


def test_scheme_config():
    assert SchemeConfig("euler", 0.01).alpha2 == pytest.approx(0.01)
    assert SchemeConfig("gear", 0.01).alpha2 == pytest.approx(0.01 * 2 / 3)
    assert SchemeConfig("euler", 1.0, 1e-5).alpha2 == pytest.approx(1e-5)
    assert SchemeConfig(Scheme.EXTRAP_GEAR, 0.1).levels == 2
    with pytest.raises(ValueError):
        SchemeConfig("euler", 0.0)
    with pytest.raises(ValueError):
        SchemeConfig("rk4", 0.1)
    with pytest.raises(ValueError):
        Discretization(extension="harmonic")


def test_compute_B_examples():
    s = const_stepper(0.0)
    zero = s.initial_state(lambda p: np.zeros(len(p)))
    pts = np.array([[0.75, 0.5], [0.5, 0.8]])
    B = compute_B(zero, SchemeConfig("euler", 0.1), lambda p, t, u: np.ones(len(p)))
    assert np.allclose(B(pts), 0.1, atol=1e-14)

    s3 = const_stepper(3.0)
    c = s3.initial_state(lambda p: np.full(len(p), 3.0))
    two = TimeState(1, 0.1, [c.u, c.u])
    assert np.allclose(compute_B(two, SchemeConfig("gear", 0.1))(pts), 3.0, atol=1e-13)
    with pytest.raises(BootstrapRequiredError):
        compute_B(c, SchemeConfig("gear", 0.1))


def test_compute_B_example1_spot_value():
    prob = Problem(annulus(), [np.cos(8), np.cos(2)], example1_forcing(C))
    s = Stepper(prob, Discretization(tau=1e-7, max_level=8))
    st = s.initial_state(lambda p: analytic_example1(p - C, 0.0, LAM))
    x = C + np.array([[0.25, 0.0]])
    dt = 1e-3
    want = st.u.evaluate(x)[0] + dt * (400 * np.cos(5.0) + 20 * np.sin(5.0) / 0.25)
    assert compute_B(st, SchemeConfig("euler", dt), prob.forcing)(x)[0] == pytest.approx(want, abs=1e-13)


def test_compute_B_allen_cahn_forcing():
    s = const_stepper(0.5, epsilon=1e-5)
    st = s.initial_state(lambda p: np.full(len(p), 0.5))
    f = lambda p, t, u: u * (1 - u * u)
    B = compute_B(st, SchemeConfig("euler", 1.0, 1e-5), f)
    assert B([[0.75, 0.5]])[0] == pytest.approx(0.5 + 0.5 * 0.75)


@pytest.mark.parametrize("scheme", ["euler", "gear"])
def test_constant_state_preserved(scheme):
    s = const_stepper(2.0)
    st = s.initial_state(lambda p: np.full(len(p), 2.0))
    sc = SchemeConfig(scheme, 1e-3)
    st = advance(st, sc, s, 100)
    assert st.step == 100 and st.time == pytest.approx(0.1)
    v = st.u.values.ravel()[safe_mask(st.u, sc.alpha)]
    assert np.max(np.abs(v - 2.0)) <= 1e-6


def test_history_shift_is_bitwise():
    s = const_stepper(1.0)
    st = s.initial_state(lambda p: 1.0 + 0.1 * np.sin(8 * p[:, 0]))
    new = step(st, SchemeConfig("euler", 1e-3), s)
    assert new.history[1] is st.history[0]
    assert np.array_equal(new.history[1].values, st.u.values)
    assert new.step == 1 and new.info["last"].gmres_iterations > 0


def test_gear_requires_bootstrap():
    s = const_stepper(1.0)
    st = s.initial_state(lambda p: np.ones(len(p)))
    with pytest.raises(BootstrapRequiredError):
        step(st, SchemeConfig("gear", 1e-3), s)
    boot = bootstrap_gear(st, SchemeConfig("gear", 1e-3), s)
    assert len(boot.history) == 2
    assert np.max(np.abs(boot.u.values.ravel()[safe_mask(boot.u, 0.03)] - 1)) <= 1e-6


def test_stage_errors_are_tagged():
    s = const_stepper(0.0, gmres_max_iter=1)
    st = s.initial_state(lambda p: np.sin(9 * p[:, 0]) * np.cos(7 * p[:, 1]))
    with pytest.raises(StepError) as exc:
        step(st, SchemeConfig("euler", 1e-3), s)
    assert exc.value.stage == "gmres"

    def bad(points, t, u):
        raise FloatingPointError("boom")

    s2 = const_stepper(0.0)
    s2.problem.forcing = bad
    st2 = s2.initial_state(lambda p: np.zeros(len(p)))
    with pytest.raises(StepError) as exc:
        step(st2, SchemeConfig("euler", 1e-3), s2)
    assert exc.value.stage == "extend"


@pytest.mark.parametrize("value", [1.0, -1.0])
def test_allen_cahn_stationary(value):
    s = const_stepper(value, forcing=lambda p, t, u: u * (1 - u * u), epsilon=1e-5, level=6,
                      extension="dirichlet")
    st = s.initial_state(lambda p: np.full(len(p), value))
    sc = SchemeConfig("euler", 1.0, 1e-5)
    st = advance(st, sc, s, 5)
    v = st.u.values.ravel()[safe_mask(st.u, sc.alpha)]
    assert np.max(np.abs(v - value)) <= 1e-6


def test_steady_part_of_example1_is_preserved():
    # u* = cos(20 r) satisfies -Lap u* = F, so one step from u* returns u*
    prob = Problem(annulus(256), [np.cos(8), np.cos(2)], example1_forcing(C))
    s = Stepper(prob, Discretization(tau=1e-7, max_level=8))
    ustar = lambda p: np.cos(20 * np.hypot(*(p - C).T))
    errs = []
    for dt in (1e-3,):
        st = step(s.initial_state(ustar), SchemeConfig("euler", dt), s)
        pts = st.u.grid_points()
        om = prob.curves.component(pts, tol=None) < 0
        d, cid, _ = prob.curves.nearest(pts[om])
        keep = d >= 5 * prob.curves.curves[0].h * 0.4
        errs.append(np.max(np.abs(st.u.values.ravel()[om][keep] - ustar(pts[om][keep]))))
    assert max(errs) <= 1e-5


def test_analytic_example1():
    assert analytic_example1([[0.1, 0.0]], 0.3, LAM) == pytest.approx(np.cos(2), abs=1e-12)
    assert analytic_example1([[0.0, 0.4]], 0.0, LAM) == pytest.approx(np.cos(8), abs=1e-12)
    x = np.array([[0.2, 0.1], [0.0, 0.3]])
    assert np.allclose(analytic_example1(x, 10.0, LAM), np.cos(20 * np.hypot(*x.T)), atol=1e-14)
    with pytest.raises(DomainError):
        analytic_example1([[0.05, 0.0]], 0.0, LAM)
    with pytest.raises(DomainError):
        analytic_example1([[0.5, 0.0]], 0.0, LAM)
