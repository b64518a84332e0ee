import numpy as np
import pytest
from scipy import special as sps

from heatbie.boundary_integral import (ALPERT_RULES, BoundaryOperator, ConfigurationError,
                                       LayerEvaluator, NearBoundaryError, alpert_rule,
                                       apply_operator, build_rhs, eval_homogeneous, kernel_K)
from heatbie.geometry import CurveSet, circle, fourier_interpolate, normals_curvature
from heatbie.linear_solver import gmres
from heatbie.verify import (alpert_test_error, annulus_error, annulus_oracle, example2_curves,
                            loglog_order, manufactured_error, point_source_solution)


def annulus(n):
    return CurveSet([circle(0, n, (0.5, 0.5), 0.4), circle(1, n, (0.5, 0.5), 0.1)])


def test_kernel_diagonal_limit():
    g = normals_curvature(circle(0, 64, (0.5, 0.5), 0.4))
    y = g.nodes[:, 3]
    v = kernel_K(y, y, g.normal[:, 3], g.speed[3], 0.05, g.curvature[3])
    assert v == pytest.approx(-0.5 * 2.5 * g.speed[3], rel=1e-14)


def test_kernel_screened_far_away():
    a = 0.01
    v = kernel_K(np.array([0.5 + 50 * a, 0.5]), np.array([0.5, 0.5]), np.array([1.0, 0.0]), 1.0, a, 0.0)
    assert abs(v) <= 1e-18
    ref = np.exp(-50) * np.sqrt(np.pi / 100) / a
    assert abs(v) == pytest.approx(ref, rel=0.02)


def test_kernel_tangential_is_zero():
    v = kernel_K(np.array([0.6, 0.5]), np.array([0.5, 0.5]), np.array([0.0, 1.0]), 1.0, 0.05, 0.0)
    assert v == 0.0


def test_kernel_continuous_across_diagonal():
    g = normals_curvature(circle(0, 64, (0.5, 0.5), 0.4))
    c = g.curve
    diag = -0.5 * g.curvature[0] * g.speed[0]
    diffs = []
    for d in (1e-2, 5e-3, 2.5e-3):
        t = np.array([d / c.h])
        y = np.array([fourier_interpolate(c.nodes[i], t)[0] for i in range(2)])
        th = d
        n_y = np.array([np.cos(th), np.sin(th)])
        diffs.append(abs(kernel_K(y, c.nodes[:, 0], n_y, 0.4, 0.05, 2.5) - diag))
    assert diffs[0] > diffs[1] > diffs[2]
    ratios = np.array(diffs[:-1]) / diffs[1:]
    assert np.all(ratios > 1.7)


def test_rule_tables():
    for p, rule in ALPERT_RULES.items():
        assert all(w > 0 for w in rule.weights)
        assert all(0 < v < rule.a for v in rule.nodes)
    with pytest.raises(ConfigurationError):
        alpert_rule(7)


@pytest.mark.parametrize("p", sorted(ALPERT_RULES))
def test_alpert_order(p):
    ns = np.array([16, 24, 32, 48, 64])
    errs = np.array([alpert_test_error(n, p) for n in ns])
    keep = errs > 1e-14
    assert abs(loglog_order(ns[keep], errs[keep]) - p) / p <= 0.2


def test_zero_density():
    assert np.all(apply_operator(np.zeros(128), annulus(64), 0.05) == 0)
    cs = annulus(64)
    assert np.all(eval_homogeneous(np.zeros(128), [[0.75, 0.5]], cs, 0.05) == 0)


def test_too_few_nodes():
    with pytest.raises(ConfigurationError):
        BoundaryOperator(annulus(16), 0.05, 10)


def test_dense_matches_apply():
    op = BoundaryOperator(annulus(64), 0.05)
    s = np.random.default_rng(0).standard_normal(128)
    assert np.allclose(op.dense() @ s, op.apply(s), atol=1e-13)


def test_large_alpha_limit():
    # alpha -> inf approaches the Laplace double layer, which on a doubly
    # connected domain has a one-dimensional defect: the smallest singular
    # value decays like alpha^-2 while the rest of the spectrum converges
    svs = [np.linalg.svd(BoundaryOperator(annulus(64), a).dense(), compute_uv=False)
           for a in (10.0, 100.0, 1000.0)]
    small = np.array([s[-1] for s in svs])
    assert np.allclose(small[:-1] / small[1:], 100, rtol=1e-3)
    assert abs(svs[-1][-2] - svs[-2][-2]) < 1e-4
    assert svs[-1][0] == pytest.approx(2 * np.sqrt(2), rel=1e-4)


def test_condition_number_bounded():
    conds = [np.linalg.cond(BoundaryOperator(annulus(n), 0.05).dense()) for n in (64, 128, 256)]
    assert max(conds) / min(conds) < 1.1


def test_build_rhs():
    assert np.allclose(build_rhs(np.ones(4), np.zeros(4), 0.5), -0.5)
    assert np.all(build_rhs(np.ones(4), np.ones(4), 0.1) == 0)
    with pytest.raises(ConfigurationError):
        build_rhs(np.ones(4), np.ones(3), 0.1)


def test_matching_data_gives_zero_density():
    op = BoundaryOperator(annulus(64), 0.05)
    sigma, rep = gmres(op.apply, build_rhs(np.ones(128), np.ones(128), 0.05))
    assert rep.iterations == 0 and np.all(sigma == 0)


def test_annulus_oracle_n256():
    assert annulus_error(256) <= 1e-8


def test_annulus_radius_025():
    n, alpha = 256, 0.05
    cs = annulus(n)
    op = BoundaryOperator(cs, alpha)
    g = np.r_[np.zeros(n), np.ones(n)]
    sigma = np.linalg.solve(op.dense(), build_rhs(g, np.zeros(2 * n), alpha))
    u = eval_homogeneous(sigma, [[0.75, 0.5], [0.5, 0.25]], cs, alpha)
    assert np.allclose(u, annulus_oracle(alpha, 0, 1)(0.25), atol=1e-8)


def test_manufactured_ellipse_order():
    ns = [64, 128]
    errs = [manufactured_error(n) for n in ns]
    assert loglog_order(ns, errs) >= 9.5
    assert errs[-1] < 1e-9


def test_near_boundary_guard():
    cs = annulus(64)
    with pytest.raises(NearBoundaryError):
        LayerEvaluator(cs, 0.05, [[0.5 + 0.3999, 0.5]], near="raise")
    with pytest.raises(ValueError):
        LayerEvaluator(cs, 0.05, [[0.75, 0.5]], near="maybe")


def test_near_interpolation_accuracy():
    alpha, n = 0.05, 256
    cs = example2_curves(n)
    u = point_source_solution(alpha)
    op = BoundaryOperator(cs, alpha)
    f = np.concatenate([u(c.nodes.T) for c in cs.curves])
    sigma = np.linalg.solve(op.dense(), build_rhs(f, np.zeros_like(f), alpha))
    # points very close to the outer ellipse, inside Omega
    c = cs.curves[0]
    g = cs.geometry[0]
    pts = (c.nodes - 1e-4 * g.normal)[:, ::16].T
    ev = LayerEvaluator(cs, alpha, pts, near="interpolate")
    assert len(ev.near_idx) > 0
    assert np.max(np.abs(ev(sigma, f) - u(pts))) < 1e-6


def test_far_target_screening_envelope():
    n, alpha = 128, 0.01
    cs = annulus(n)
    sigma = np.zeros(2 * n)
    sigma[:5] = 1.0  # localized near angle 0 on the outer circle
    val = eval_homogeneous(sigma, [[0.5, 0.8]], cs, alpha)[0]
    bound = np.sum(np.abs(sigma)) * 0.4 * cs.curves[0].h * sps.k1(0.2 / alpha) / alpha / (2 * np.pi * alpha**2)
    assert abs(val) <= bound
