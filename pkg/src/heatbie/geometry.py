"""Smooth closed boundary curves sampled at equispaced parameter values.

All derivative and off-node quantities are computed spectrally from the
node samples (FFT differentiation / trigonometric interpolation).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from numba import njit
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


class AmbiguousPointError(GeometryError):
    """A query point lies (numerically) on a boundary curve."""


class Region(IntEnum):
    EXTERIOR = 0
    OMEGA = 1
    HOLE = 2


# ---------------------------------------------------------------- Fourier tools

def _wavenumbers(n):
    k = np.fft.fftfreq(n, 1.0 / n)
    return k


def spectral_diff(values, order=1):
    """Derivative in alpha of 2pi-periodic samples (last axis).

    The Nyquist mode is treated as cos(N/2 alpha), whose odd derivatives
    vanish at the nodes.
    """
    n = values.shape[-1]
    k = _wavenumbers(n)
    mult = (1j * k) ** order
    if order % 2 == 1:
        mult[n // 2] = 0.0
    return np.real(np.fft.ifft(np.fft.fft(values, axis=-1) * mult, axis=-1))


def shift_multiplier(n, delta):
    """Fourier multiplier mapping f(alpha_j) -> f(alpha_j + delta)."""
    k = _wavenumbers(n)
    mult = np.exp(1j * k * delta)
    mult[n // 2] = np.cos(n / 2 * delta)
    return mult


def shifted_samples(values, delta):
    """Trigonometric interpolant of the samples evaluated at alpha_j + delta."""
    n = values.shape[-1]
    return np.real(np.fft.ifft(np.fft.fft(values, axis=-1) * shift_multiplier(n, delta), axis=-1))


def shifted_difference(values, delta):
    """f(alpha_j + delta) - f(alpha_j) without cancellation for small delta."""
    n = values.shape[-1]
    k = _wavenumbers(n)
    half = 0.5 * k * delta
    mult = 2j * np.sin(half) * np.exp(1j * half)
    mult[n // 2] = np.cos(n / 2 * delta) - 1.0
    return np.real(np.fft.ifft(np.fft.fft(values, axis=-1) * mult, axis=-1))


@njit(cache=True)
def _trig_eval(a, b, nyq, alpha):
    # sum_k a_k cos(k x) + b_k sin(k x) + nyq cos(n/2 x), by angle addition
    out = np.empty(alpha.size)
    m = a.size
    for i in range(alpha.size):
        x = alpha[i]
        c1, s1 = np.cos(x), np.sin(x)
        ck, sk = 1.0, 0.0
        acc = a[0]
        for k in range(1, m):
            ck, sk = ck * c1 - sk * s1, sk * c1 + ck * s1
            acc += a[k] * ck + b[k] * sk
        out[i] = acc + nyq * np.cos(m * x)
    return out


def fourier_interpolate(samples, t):
    """Trigonometric interpolant of periodic samples at fractional index ``t``.

    ``t`` may be a scalar or array; the parameter is alpha = t * 2pi / N.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if n % 2:
        raise GeometryError("Fourier interpolation needs an even sample count")
    c = np.fft.rfft(samples) / n
    half = n // 2
    a = 2.0 * np.real(c[:half])
    b = -2.0 * np.imag(c[:half])
    a[0] = np.real(c[0])
    t = np.asarray(t, dtype=float)
    alpha = np.ascontiguousarray(t.ravel()) * (2 * np.pi / n)
    out = _trig_eval(a, b, float(np.real(c[half])), alpha).reshape(t.shape)
    return out[()] if out.ndim == 0 else out


def upsample(values, factor):
    """Resample periodic samples on a ``factor`` times finer grid."""
    n = values.shape[-1]
    m = n * factor
    c = np.fft.fft(values, axis=-1)
    out = np.zeros(values.shape[:-1] + (m,), dtype=complex)
    half = n // 2
    out[..., :half] = c[..., :half]
    out[..., m - half + 1:] = c[..., half + 1:]
    out[..., half] = 0.5 * c[..., half]
    out[..., m - half] = 0.5 * c[..., half]
    return np.real(np.fft.ifft(out, axis=-1)) * factor


# ---------------------------------------------------------------- curves

@dataclass(frozen=True)
class ClosedCurve:
    """One boundary component sampled at alpha_j = 2 pi j / N.

    ``index`` 0 is the outer boundary, >= 1 are holes.  Nodes are stored
    counterclockwise; the outward normal (away from the domain) is the
    right-hand normal on the outer curve and the left-hand one on holes.
    """

    index: int
    nodes: np.ndarray  # (2, N)
    spec: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[0] != 2:
            raise GeometryError("nodes must have shape (2, N)")
        n = nodes.shape[1]
        if n % 2 or n < 16:
            raise GeometryError(f"node count must be even and >= 16, got {n}")
        if signed_area(nodes) < 0:
            nodes = nodes[:, (-np.arange(n)) % n]
        object.__setattr__(self, "nodes", nodes)
        if _polygon_self_intersects(nodes):
            raise GeometryError(f"curve {self.index} is not simple")

    @property
    def n(self):
        return self.nodes.shape[1]

    @property
    def h(self):
        return 2 * np.pi / self.n

    @property
    def normal_sign(self):
        return 1.0 if self.index == 0 else -1.0

    def resampled(self, n):
        """The same curve (via its trigonometric interpolant) at n nodes."""
        if n % self.n == 0:
            nodes = upsample(self.nodes, n // self.n)
        else:
            t = np.arange(n) * self.n / n
            nodes = np.stack([fourier_interpolate(self.nodes[0], t),
                              fourier_interpolate(self.nodes[1], t)])
        return ClosedCurve(self.index, nodes, self.spec)


def signed_area(nodes):
    x, y = nodes
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _segments_intersect(p1, p2, q1, q2):
    def orient(a, b, c):
        return np.sign((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                       - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))
    return ((orient(p1, p2, q1) * orient(p1, p2, q2) < 0)
            & (orient(q1, q2, p1) * orient(q1, q2, p2) < 0))


def _polygon_self_intersects(nodes):
    pts = nodes.T
    n = len(pts)
    a = pts
    b = np.roll(pts, -1, axis=0)
    for i in range(n):
        j = np.arange(i + 2, n)
        if i == 0:
            j = j[j != n - 1]
        if len(j) == 0:
            continue
        if np.any(_segments_intersect(a[i], b[i], a[j], b[j])):
            return True
    return False


def circle(index, n, center, radius):
    a = np.arange(n) * 2 * np.pi / n
    nodes = np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)])
    return ClosedCurve(index, nodes, dict(family="circle", center=tuple(center), radius=radius))


def ellipse(index, n, center, axes, rotation=0.0):
    a = np.arange(n) * 2 * np.pi / n
    x = axes[0] * np.cos(a)
    y = axes[1] * np.sin(a)
    c, s = np.cos(rotation), np.sin(rotation)
    nodes = np.stack([center[0] + c * x - s * y, center[1] + s * x + c * y])
    return ClosedCurve(index, nodes, dict(family="ellipse", center=tuple(center),
                                          axes=tuple(axes), rotation=rotation))


def fourier_curve(index, n, center, cos_coeffs, sin_coeffs):
    """Curve (x, y) = center + sum_m a_m cos(m alpha) + b_m sin(m alpha).

    ``cos_coeffs`` and ``sin_coeffs`` are sequences of 2-vectors for
    m = 1, 2, ....
    """
    a = np.arange(n) * 2 * np.pi / n
    nodes = np.array(center, dtype=float)[:, None] * np.ones(n)
    for m, (ac, bs) in enumerate(zip(cos_coeffs, sin_coeffs), start=1):
        nodes = nodes + np.outer(ac, np.cos(m * a)) + np.outer(bs, np.sin(m * a))
    return ClosedCurve(index, nodes, dict(family="fourier", center=tuple(center)))


# ---------------------------------------------------------------- geometry cache

def spectral_derivatives(curve):
    """First and second alpha-derivatives of the node coordinates."""
    return spectral_diff(curve.nodes, 1), spectral_diff(curve.nodes, 2)


@dataclass(frozen=True)
class GeometryCache:
    curve: ClosedCurve
    d1: np.ndarray
    d2: np.ndarray
    speed: np.ndarray
    normal: np.ndarray
    curvature: np.ndarray

    @property
    def nodes(self):
        return self.curve.nodes


def outward_normal(d1, speed, sign):
    return sign * np.stack([d1[1], -d1[0]]) / speed


def normals_curvature(curve):
    """Unit normals pointing out of the domain and signed curvature.

    Curvature is -(y'' . n) / |y'|^2, positive where the domain is locally
    convex, so a circle bounding the domain from outside has +1/r and a
    circular hole has -1/r.
    """
    d1, d2 = spectral_derivatives(curve)
    speed = np.hypot(d1[0], d1[1])
    if np.any(speed < 1e-10):
        raise GeometryError("degenerate parametrization (speed < 1e-10)")
    normal = outward_normal(d1, speed, curve.normal_sign)
    kappa = -np.sum(d2 * normal, axis=0) / speed**2
    return GeometryCache(curve, d1, d2, speed, normal, kappa)


# ---------------------------------------------------------------- point queries

class CurveSet:
    """A list of curves (outer first) with point classification helpers."""

    def __init__(self, curves, classify_upsample=8):
        if not curves:
            raise GeometryError("at least one curve is required")
        if curves[0].index != 0 or any(c.index == 0 for c in curves[1:]):
            raise GeometryError("exactly one outer curve (index 0), listed first")
        self.curves = list(curves)
        self.geometry = [normals_curvature(c) for c in self.curves]
        self._poly = [c.resampled(c.n * classify_upsample).nodes for c in self.curves]
        self._check_nesting()
        self._kdtree = None

    def __len__(self):
        return len(self.curves)

    def _check_nesting(self):
        outer = self._poly[0]
        for k, poly in enumerate(self._poly[1:], start=1):
            if not np.all(_inside_polygon(poly.T, outer)):
                raise GeometryError(f"hole {k} is not inside the outer curve")
            for j, other in enumerate(self._poly[1:], start=1):
                if j != k and np.any(_inside_polygon(poly.T, other)):
                    raise GeometryError(f"holes {k} and {j} intersect")

    def classify(self, points, tol=1e-10):
        """Region of each point (array of shape (m, 2))."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        inside = [_inside_polygon(points, poly, tol) for poly in self._poly]
        region = np.where(inside[0], Region.OMEGA, Region.EXTERIOR).astype(np.int8)
        for ins in inside[1:]:
            region[ins] = Region.HOLE
        return region

    def component(self, points, tol=1e-10):
        """-1 in Omega, 0 outside the outer curve, k inside hole k."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.where(_inside_polygon(points, self._poly[0], tol), -1, 0)
        for k, poly in enumerate(self._poly[1:], start=1):
            out[_inside_polygon(points, poly, tol)] = k
        return out

    def classify_point(self, x):
        return Region(int(self.classify(np.asarray(x)[None])[0]))

    def _tree(self):
        if self._kdtree is None:
            fine = []
            ids = []
            for k, c in enumerate(self.curves):
                m = c.n * 16
                pts = c.resampled(m).nodes.T
                fine.append(pts)
                ids.append(np.stack([np.full(m, k), np.arange(m)], axis=1))
            self._fine_ids = np.concatenate(ids)
            self._fine_n = [c.n * 16 for c in self.curves]
            self._kdtree = cKDTree(np.concatenate(fine))
        return self._kdtree

    def nearest(self, points, upper=np.inf):
        """Approximate distance to the curves, curve id and parameter index.

        Uses a 16x oversampled copy of each curve followed by a Newton
        refinement of the parameter; returned ``t`` is in units of the
        curve's own node spacing.  Points farther than ``upper`` get
        ``dist = inf``.
        """
        points = np.atleast_2d(points)
        tree = self._tree()
        dist, idx = tree.query(points, distance_upper_bound=upper)
        found = np.isfinite(dist)
        curve_id = np.full(len(points), -1)
        t = np.zeros(len(points))
        if np.any(found):
            ids = self._fine_ids[idx[found]]
            curve_id[found] = ids[:, 0]
            t[found] = ids[:, 1] / 16.0
            for k, c in enumerate(self.curves):
                sel = np.flatnonzero(found & (curve_id == k))
                if len(sel) == 0:
                    continue
                tk = t[sel]
                for _ in range(4):
                    pos, d1, d2 = _curve_eval(c, tk)
                    diff = pos - points[sel].T
                    g = np.sum(diff * d1, axis=0)
                    hss = np.sum(d1 * d1, axis=0) + np.sum(diff * d2, axis=0)
                    step = g / hss * (c.n / (2 * np.pi))
                    tk = tk - np.clip(step, -1, 1)
                pos, _, _ = _curve_eval(c, tk)
                t[sel] = tk % c.n
                dist[sel] = np.hypot(*(pos - points[sel].T))
        return dist, curve_id, t


def _curve_eval(curve, t):
    nodes = curve.nodes
    d1 = spectral_diff(nodes, 1)
    d2 = spectral_diff(nodes, 2)
    pos = np.stack([fourier_interpolate(nodes[i], t) for i in range(2)])
    v1 = np.stack([fourier_interpolate(d1[i], t) for i in range(2)])
    v2 = np.stack([fourier_interpolate(d2[i], t) for i in range(2)])
    return pos, v1, v2


def _inside_polygon(points, poly, tol=None):
    """Crossing-number test, grouped by unique y so each row is a sort.

    Raises AmbiguousPointError when ``tol`` is given and a point is within
    ``tol`` of a polygon edge crossing on its row.
    """
    x0, y0 = poly
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ys, inv = np.unique(points[:, 1], return_inverse=True)
    inside = np.zeros(len(points), dtype=bool)
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(ys) + 1))
    ylo = np.minimum(y0, y1)
    yhi = np.maximum(y0, y1)
    for r, yv in enumerate(ys):
        sel = (ylo <= yv) & (yhi > yv)
        if not np.any(sel):
            continue
        xa, xb, ya, yb = x0[sel], x1[sel], y0[sel], y1[sel]
        xc = np.sort(xa + (yv - ya) * (xb - xa) / (yb - ya))
        pidx = order[bounds[r]:bounds[r + 1]]
        px = points[pidx, 0]
        cnt = len(xc) - np.searchsorted(xc, px, side="right")
        inside[pidx] = cnt % 2 == 1
        if tol is not None:
            j = np.clip(np.searchsorted(xc, px), 1, len(xc) - 1)
            gap = np.minimum(np.abs(px - xc[j - 1]), np.abs(px - xc[j]))
            if np.any(gap < tol):
                raise AmbiguousPointError("point within tolerance of a boundary")
    return inside
