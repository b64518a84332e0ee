import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatbie.geometry import (AmbiguousPointError, ClosedCurve, CurveSet, GeometryError, Region,
                              circle, ellipse, fourier_curve, fourier_interpolate,
                              normals_curvature, shifted_difference, shifted_samples,
                              spectral_derivatives, upsample)

ALPHA = lambda n: np.arange(n) * 2 * np.pi / n


def test_circle_first_derivative():
    c = circle(0, 64, (0.3, 0.6), 0.25)
    d1, _ = spectral_derivatives(c)
    a = ALPHA(64)
    assert np.allclose(d1, [-0.25 * np.sin(a), 0.25 * np.cos(a)], atol=1e-12, rtol=0)


def test_ellipse_second_derivative():
    c = ellipse(0, 64, (0.0, 0.0), (0.4, 0.2))
    _, d2 = spectral_derivatives(c)
    a = ALPHA(64)
    assert np.allclose(d2, [-0.4 * np.cos(a), -0.2 * np.sin(a)], atol=1e-12, rtol=0)


@pytest.mark.parametrize("r", [0.4, 0.1])
def test_circle_curvature(r):
    g = normals_curvature(circle(0, 64, (0.5, 0.5), r))
    assert np.allclose(g.curvature, 1 / r, rtol=1e-10)
    assert np.allclose(np.hypot(*g.normal), 1, atol=1e-14)


def test_hole_normal_points_to_center_and_curvature_negative():
    g = normals_curvature(circle(1, 64, (0.5, 0.5), 0.1))
    radial = (g.nodes - 0.5) / 0.1
    assert np.allclose(g.normal, -radial, atol=1e-12)
    assert np.allclose(g.curvature, -10.0, rtol=1e-10)


def test_ellipse_curvature_at_zero():
    g = normals_curvature(ellipse(0, 128, (0.5, 0.5), (0.4, 0.2)))
    assert g.curvature[0] == pytest.approx(10.0, rel=1e-10)
    a = ALPHA(128)
    ref = 0.08 / (0.16 * np.sin(a) ** 2 + 0.04 * np.cos(a) ** 2) ** 1.5
    assert np.allclose(g.curvature, ref, rtol=1e-10)


@pytest.mark.parametrize("n", [32, 64, 128])
def test_arclength_of_circle(n):
    g = normals_curvature(circle(0, n, (0.5, 0.5), 0.3))
    assert abs(np.sum(g.speed) * 2 * np.pi / n - 2 * np.pi * 0.3) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 0.4), st.floats(0.05, 0.3), st.floats(0, np.pi))
def test_total_curvature(a, b, rot):
    for index, sign in ((0, 1), (1, -1)):
        g = normals_curvature(ellipse(index, 256, (0.5, 0.5), (a, b), rot))
        total = np.sum(g.curvature * g.speed) * (2 * np.pi / 256) / (2 * np.pi)
        assert abs(total - sign) <= 1e-10


def test_normals_stable_under_refinement():
    c = ellipse(0, 128, (0.5, 0.5), (0.4, 0.25), 0.3)
    g1 = normals_curvature(c)
    g2 = normals_curvature(c.resampled(256))
    assert np.max(np.abs(g2.normal[:, ::2] - g1.normal)) < 1e-12


def test_orientation_is_normalized():
    c = circle(0, 32, (0.5, 0.5), 0.2)
    rev = ClosedCurve(0, c.nodes[:, ::-1])
    assert np.allclose(np.sort(rev.nodes[0]), np.sort(c.nodes[0]))
    g = normals_curvature(rev)
    assert np.all(np.sum(g.normal * (g.nodes - 0.5), axis=0) > 0)


def test_invalid_curves():
    with pytest.raises(GeometryError):
        ClosedCurve(0, np.zeros((2, 15)))
    with pytest.raises(GeometryError):
        ClosedCurve(0, np.zeros((3, 16)))
    a = ALPHA(64) + 0.03  # keep the crossing off the nodes
    figure8 = np.stack([np.sin(a), np.sin(a) * np.cos(a)])
    with pytest.raises(GeometryError):
        ClosedCurve(0, figure8)


def test_degenerate_parametrization():
    a = ALPHA(32)
    # x = cos^3 has zero speed at alpha = 0 together with y = sin^3
    with pytest.raises(GeometryError):
        normals_curvature(ClosedCurve(0, np.stack([np.cos(a) ** 3, np.sin(a) ** 3])))


def test_fourier_tools_exact_for_trig_polynomials():
    n = 32
    a = ALPHA(n)
    f = lambda x: 1 + np.cos(3 * x) - 0.5 * np.sin(7 * x)
    v = f(a)
    t = np.linspace(0, n, 101)
    assert np.allclose(fourier_interpolate(v, t), f(t * 2 * np.pi / n), atol=1e-13)
    assert np.allclose(shifted_samples(v, 0.1), f(a + 0.1), atol=1e-13)
    assert np.allclose(shifted_difference(v, 1e-9), f(a + 1e-9) - v, atol=1e-20 + 1e-9 * 1e-6)
    assert np.allclose(upsample(v, 4), f(ALPHA(4 * n)), atol=1e-13)


def test_fourier_curve_matches_ellipse():
    c = fourier_curve(0, 64, (0.5, 0.5), [(0.3, 0.0)], [(0.0, 0.2)])
    e = ellipse(0, 64, (0.5, 0.5), (0.3, 0.2))
    assert np.allclose(c.nodes, e.nodes, atol=1e-15)


@pytest.fixture(scope="module")
def annulus():
    return CurveSet([circle(0, 64, (0.5, 0.5), 0.4), circle(1, 64, (0.5, 0.5), 0.1)])


def test_classify_point(annulus):
    assert annulus.classify_point((0.5, 0.5)) is Region.HOLE
    assert annulus.classify_point((0.75, 0.5)) is Region.OMEGA
    assert annulus.classify_point((0.98, 0.98)) is Region.EXTERIOR
    assert list(annulus.component([[0.5, 0.5], [0.75, 0.5], [0.98, 0.98]])) == [1, -1, 0]


def test_classify_ambiguous(annulus):
    with pytest.raises(AmbiguousPointError):
        annulus.classify(annulus.curves[0].nodes[:, :1].T)


def test_classify_matches_radius(annulus):
    rng = np.random.default_rng(3)
    p = rng.random((5000, 2))
    r = np.hypot(p[:, 0] - 0.5, p[:, 1] - 0.5)
    keep = (np.abs(r - 0.4) > 1e-3) & (np.abs(r - 0.1) > 1e-3)
    p, r = p[keep], r[keep]
    want = np.where(r > 0.4, Region.EXTERIOR, np.where(r < 0.1, Region.HOLE, Region.OMEGA))
    assert np.array_equal(annulus.classify(p), want)


def test_nearest_distance(annulus):
    rng = np.random.default_rng(4)
    p = 0.5 + 0.45 * (rng.random((300, 2)) - 0.5)
    r = np.hypot(p[:, 0] - 0.5, p[:, 1] - 0.5)
    d, cid, _ = annulus.nearest(p)
    ref = np.minimum(np.abs(r - 0.4), np.abs(r - 0.1))
    assert np.allclose(d, ref, atol=1e-12)
    assert np.array_equal(cid, np.where(np.abs(r - 0.4) < np.abs(r - 0.1), 0, 1))


def test_curveset_validation():
    with pytest.raises(GeometryError):
        CurveSet([])
    with pytest.raises(GeometryError):
        CurveSet([circle(1, 32, (0.5, 0.5), 0.1)])
    with pytest.raises(GeometryError):
        CurveSet([circle(0, 32, (0.5, 0.5), 0.1), circle(1, 32, (0.8, 0.8), 0.1)])
