from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatbie.quadtree import (DomainError, Leaf, QuadTree, RefinementBudgetError, SAMPLE_BASIS,
                              build_tree, cubic_basis, eval_leaf, fit_leaf_polynomial,
                              is_balanced, uniform_tree)


def gaussian(x0=(0.4, 0.55), s=0.05):
    return lambda x, y: np.exp(-(((x - x0[0]) ** 2 + (y - x0[1]) ** 2) / s**2))


def leaf_at(center, half_width, level, f):
    leaf = Leaf(np.asarray(center, float), half_width, level, None, None)
    leaf.values = f(*leaf.sample_points().T)
    leaf.coeffs = fit_leaf_polynomial(leaf.values, half_width)
    return leaf


def test_fit_constant():
    c = fit_leaf_polynomial(np.ones(16), 0.1)
    assert np.allclose(c, np.eye(10)[0], atol=1e-14)


def test_fit_cubic_exact():
    f = lambda x, y: x**3 - 2 * x * y
    leaf = leaf_at((0.3, 0.7), 0.05, 3, f)
    assert np.max(np.abs(SAMPLE_BASIS @ leaf.coeffs - leaf.values)) <= 1e-12
    rng = np.random.default_rng(0)
    pts = leaf.center + (rng.random((50, 2)) - 0.5) * leaf.width
    assert np.allclose(eval_leaf(leaf, pts), f(*pts.T), atol=1e-12)
    assert eval_leaf(leaf, leaf.center) == pytest.approx(f(*leaf.center), abs=1e-12)


def test_fit_order_of_accuracy():
    f = lambda x, y: np.exp(-(x * x + y * y))
    rel = np.random.default_rng(1).random((200, 2)) - 0.5
    errs = []
    for level in (4, 5, 6):
        h = 0.5**level
        leaf = leaf_at((0.3 + h / 2, 0.2 + h / 2), h / 2, level, f)
        pts = leaf.center + rel * leaf.width
        errs.append(np.max(np.abs(eval_leaf(leaf, pts) - f(*pts.T))))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= 3.7)


def test_eval_leaf_rejects_extrapolation():
    leaf = leaf_at((0.5, 0.5), 0.25, 1, lambda x, y: x)
    with pytest.raises(DomainError):
        eval_leaf(leaf, (0.8, 0.5))


def test_constant_field_single_leaf():
    t = build_tree(lambda x, y: np.full_like(x, 3.0), 1e-6, 10, min_level=0)
    assert t.n_leaves == 1
    assert t.locate_leaf((0.5, 0.5)).level == 0
    assert eval_leaf(t.leaf(0), (0.1, 0.9)) == pytest.approx(3.0)


def test_cubic_field_stays_at_min_level():
    t = build_tree(lambda x, y: x**3 - x * y * y + 2 * y, 1e-10, 10, min_level=2)
    assert t.n_leaves == 16 and np.all(t.leaf_level == 2)


def test_gaussian_tree_properties():
    f = gaussian()
    t = build_tree(f, 1e-6, 10)
    # tiling: exact dyadic area sum
    assert sum(Fraction(1, 4 ** int(l)) for l in t.leaf_level) == 1
    assert is_balanced(t)
    assert np.max(t.fit_residual()) < 1e-3
    # refinement concentrates near the bump
    deep = t.leaf_center[t.leaf_level == t.leaf_level.max()]
    assert np.max(np.hypot(deep[:, 0] - 0.4, deep[:, 1] - 0.55)) < 0.25
    # interpolation error against the field at random points
    rng = np.random.default_rng(2)
    p = rng.random((20000, 2))
    assert np.max(np.abs(t.evaluate(p) - f(*p.T))) <= 4 * 1e-6


def test_tau_16x_deepens_by_one():
    f = gaussian()
    t1 = build_tree(f, 1e-6, 12)
    t2 = build_tree(f, 1e-6 / 16, 12)
    assert t2.leaf_level.max() - t1.leaf_level.max() == 1


def test_refinement_monotone():
    f = gaussian(s=0.08)
    coarse = build_tree(f, 1e-4, 9)
    fine = build_tree(f, 1e-6, 9)
    # every fine leaf sits inside a coarse leaf of equal or lower level
    owner = coarse.locate(fine.leaf_center)
    assert np.all(fine.leaf_level >= coarse.leaf_level[owner])


def test_refinement_budget():
    step = lambda x, y: (x > 0.3).astype(float)
    with pytest.raises(RefinementBudgetError):
        build_tree(step, 1e-8, 12, max_leaves=500)


def test_locate_containment_and_tie_break():
    t = build_tree(gaussian(), 1e-5, 9)
    rng = np.random.default_rng(5)
    p = rng.random((100_000, 2))
    ids = t.locate(p)
    c, w = t.leaf_center[ids], t.leaf_width[ids]
    assert np.all(np.max(np.abs(p - c), axis=1) <= w / 2)
    # a brute-force scan agrees on a subsample
    for x in p[:200]:
        inside = np.flatnonzero(np.all(np.abs(x - t.leaf_center) <= t.leaf_width[:, None] / 2, axis=1))
        assert ids[np.flatnonzero((p == x).all(axis=1))[0]] in inside
    edge = np.array([[0.5, 0.3]])
    first = t.locate(edge)[0]
    assert all(t.locate(edge)[0] == first for _ in range(5))
    assert t.leaf_center[first][0] < 0.5


def test_locate_domain_error():
    t = uniform_tree(2)
    with pytest.raises(DomainError):
        t.locate([[1.2, 0.5]])


def test_evaluate_continuity_at_corner():
    tau = 1e-7
    f = gaussian(s=0.1)
    t = build_tree(f, tau, 9)
    corner = t.leaf_center[0] + t.leaf_width[0] / 2
    leaves = np.flatnonzero(np.all(np.abs(corner - t.leaf_center) <= t.leaf_width[:, None] / 2 + 1e-15, axis=1))
    vals = [eval_leaf(t.leaf(i), corner) for i in leaves]
    assert max(vals) - min(vals) <= 8 * tau


def test_grid_points_and_dump(tmp_path):
    t = uniform_tree(1).set_values(np.arange(64.0))
    g = t.grid_points()
    assert g.shape == (64, 2)
    assert np.allclose(g[:4, 0], 0.0625 * np.ones(4)) and np.allclose(g[:4, 1], [0.0625, 0.1875, 0.3125, 0.4375])
    t.dump(tmp_path / "tree.csv")
    rows = np.loadtxt(tmp_path / "tree.csv", delimiter=",", skiprows=1)
    assert rows.shape == (4, 20)
    assert np.array_equal(rows[:, 4:], t.values)


def test_incomplete_leaf_set_rejected():
    with pytest.raises(ValueError):
        QuadTree([1, 1, 1], [0, 1, 0], [0, 0, 1])


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=10, max_size=10))
def test_cubic_reproduction_property(c):
    c = np.array(c)
    rng = np.random.default_rng(0)
    xi = rng.random(16) - 0.5
    leaf_vals = SAMPLE_BASIS @ c
    assert np.allclose(fit_leaf_polynomial(leaf_vals), c, atol=1e-11)
    assert np.allclose(cubic_basis(xi, xi[::-1]) @ fit_leaf_polynomial(leaf_vals),
                       cubic_basis(xi, xi[::-1]) @ c, atol=1e-11)
