r"""Nyström discretization of the double-layer equation on smooth curves.

For u - alpha^2 Lap u = 0 in Omega with u = g on Gamma we write

    u(x) = 1/(2 pi alpha^2) \oint dK0(|x - y|/alpha)/dnu_y sigma(y) ds_y,

whose interior limit gives the second-kind equation

    sigma(x) - (1/pi) \oint K(y, x) sigma(y) ds_y = -2 alpha^2 g(x),
    K(y, x) = dK0(|x - y|/alpha)/dnu_y = -(1/alpha) K1(r/alpha) (y - x).nu_y / r,

with nu pointing out of Omega.  K is continuous on the diagonal with
limit -kappa(x)/2.  The equation is discretized with the trapezoid rule
plus Alpert's logarithmic end corrections around each target node; the
off-grid quantities the corrections need come from Fourier shifts.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .fast_summation import KernelSpec, PointFMM, sum_direct
from .geometry import (CurveSet, GeometryCache, fourier_interpolate, shift_multiplier,
                       shifted_difference, upsample)
from .special import _k1_vec


class ConfigurationError(ValueError):
    pass


class NearBoundaryError(ValueError):
    """Target too close to a curve for the plain trapezoid rule."""


@dataclass(frozen=True)
class AlpertRule:
    """Hybrid Gauss-trapezoid correction for a log singularity at a node.

    The rule skips the trapezoid nodes with |n - j| < ``a`` and adds
    ``weights[p]`` times the integrand at ``j +- nodes[p]`` (all in units
    of h).
    """

    order: int
    a: int
    nodes: tuple
    weights: tuple

    @property
    def pairs(self):
        return len(self.nodes)

    def min_points(self):
        return 2 * (self.a + self.pairs) + 1


ALPERT_RULES = {
    6: AlpertRule(6, 3, (
        4.004884194926570e-03, 7.745655373336686e-02, 3.972849993523248e-01,
        1.075673352915104e+00, 2.003796927111872e+00,
    ), (
        1.671879691147102e-02, 1.636958371447360e-01, 4.981856569770637e-01,
        8.372266245578912e-01, 9.841730844088381e-01,
    )),
    8: AlpertRule(8, 5, (
        6.531815708567918e-03, 9.086744584657729e-02, 3.967966533375878e-01,
        1.027856640525646e+00, 1.945288592909266e+00, 2.980147933889640e+00,
        3.998861349951123e+00,
    ), (
        2.462194198995203e-02, 1.701315866854178e-01, 4.609256358650077e-01,
        7.947291148621895e-01, 1.008710414337933e+00, 1.036093649726216e+00,
        1.004787656533285e+00,
    )),
    10: AlpertRule(10, 6, (
        1.175089381227308e-03, 1.877034129831289e-02, 9.686468391426860e-02,
        3.004818668002884e-01, 6.901331557173356e-01, 1.293695738083659e+00,
        2.090187729798780e+00, 3.016719313149212e+00, 4.001369747872486e+00,
        5.000025661793423e+00,
    ), (
        4.560746882084207e-03, 3.810606322384757e-02, 1.293864997289512e-01,
        2.884360381408835e-01, 4.958111914344961e-01, 7.077154600594529e-01,
        8.741924365285083e-01, 9.661361986515218e-01, 9.957887866078700e-01,
        9.998665787423845e-01,
    )),
}


def alpert_rule(order=10):
    try:
        return ALPERT_RULES[order]
    except KeyError:
        raise ConfigurationError(f"no Alpert rule of order {order}; have {sorted(ALPERT_RULES)}")


def alpert_periodic_sum(f, n, rule: AlpertRule, j=0):
    """Apply the corrected trapezoid rule to a 2 pi-periodic ``f`` that is
    log-singular at alpha_j.  ``f`` takes an array of parameter values."""
    h = 2 * np.pi / n
    k = (np.arange(n) - j) % n
    keep = (k >= rule.a) & (k <= n - rule.a)
    total = h * np.sum(f(h * np.arange(n)[keep]))
    v = np.asarray(rule.nodes)
    w = np.asarray(rule.weights)
    a0 = h * j
    return total + h * np.sum(w * (f(a0 + v * h) + f(a0 - v * h)))


# ---------------------------------------------------------------- kernel

def kernel_K(y, x, n_y, speed_y, alpha, kappa_x, speed_x=None):
    """K(y, x) * |y'|, the parametric kernel including the arclength factor.

    Points closer than 1e-12 alpha are treated as coincident and get the
    diagonal limit -kappa(x)/2 * |x'|.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    d = y - x
    r = np.hypot(d[..., 0], d[..., 1])
    if speed_x is None:
        speed_x = speed_y
    diag = r < 1e-12 * alpha
    rs = np.where(diag, 1.0, r)
    dot = d[..., 0] * n_y[..., 0] + d[..., 1] * n_y[..., 1]
    val = -_k1_vec(rs / alpha) / alpha * dot / rs * speed_y
    out = np.where(diag, -0.5 * np.asarray(kappa_x) * speed_x, val)
    return out[()] if out.ndim == 0 else out


def _kernel_from_diff(dx, dy, nx, ny, speed, alpha):
    r = np.hypot(dx, dy)
    return -_k1_vec(r / alpha) / alpha * (dx * nx + dy * ny) / r * speed


# ---------------------------------------------------------------- operator

class BoundaryOperator:
    """Discrete operator sigma -> sigma - (1/pi) (trapezoid + corrections).

    Geometry-dependent factors are computed once; :meth:`apply` is
    matrix-free (FFT shifts of sigma), :meth:`dense` assembles the matrix.
    Densities are flat vectors, curves concatenated in order.
    """

    def __init__(self, curves: CurveSet, alpha, rule: AlpertRule | int = 10):
        if isinstance(rule, int):
            rule = alpert_rule(rule)
        self.curves = curves
        self.alpha = float(alpha)
        self.rule = rule
        for c in curves.curves:
            if c.n < rule.min_points():
                raise ConfigurationError(
                    f"curve {c.index}: N={c.n} too small for order-{rule.order} rule "
                    f"(need >= {rule.min_points()})")
        self.sizes = [c.n for c in curves.curves]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self._corrections = [self._correction_factors(g) for g in curves.geometry]

    @property
    def size(self):
        return int(self.offsets[-1])

    def _correction_factors(self, g: GeometryCache):
        """For every shift +-v_p h: (multiplier, weight * h * K * speed per node)."""
        n = g.curve.n
        h = g.curve.h
        out = []
        x = g.nodes
        for v, w in zip(self.rule.nodes, self.rule.weights):
            for delta in (v * h, -v * h):
                diff = shifted_difference(x, delta)
                d1 = np.real(np.fft.ifft(np.fft.fft(g.d1, axis=-1) * shift_multiplier(n, delta), axis=-1))
                speed = np.hypot(d1[0], d1[1])
                nrm = g.curve.normal_sign * np.stack([d1[1], -d1[0]]) / speed
                kv = _kernel_from_diff(diff[0], diff[1], nrm[0], nrm[1], speed, self.alpha)
                out.append((shift_multiplier(n, delta), w * h * kv))
        return out

    def _trapezoid_block(self, gt: GeometryCache, gs: GeometryCache, same):
        """h * K(y_n, x_j) * speed_n as an (N_t, N_s) matrix."""
        xt = gt.nodes
        ys = gs.nodes
        dx = ys[0][None, :] - xt[0][:, None]
        dy = ys[1][None, :] - xt[1][:, None]
        if same:
            n = gs.curve.n
            k = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
            near = (k < self.rule.a) | (k > n - self.rule.a)
            dx = np.where(near, 1.0, dx)
            dy = np.where(near, 0.0, dy)
        blk = gs.curve.h * _kernel_from_diff(dx, dy, gs.normal[0][None, :], gs.normal[1][None, :],
                                             gs.speed[None, :], self.alpha)
        if same:
            blk[near] = 0.0
        return blk

    @cached_property
    def _blocks(self):
        geo = self.curves.geometry
        return [[self._trapezoid_block(geo[i], geo[j], i == j) for j in range(len(geo))]
                for i in range(len(geo))]

    def integral(self, sigma):
        """(Trapezoid + corrections) applied to sigma, before the 1/pi factor."""
        sigma = np.asarray(sigma, dtype=float)
        out = np.zeros(self.size)
        parts = [sigma[self.offsets[k]:self.offsets[k + 1]] for k in range(len(self.sizes))]
        for i in range(len(parts)):
            acc = np.zeros(self.sizes[i])
            for j in range(len(parts)):
                acc += self._blocks[i][j] @ parts[j]
            spec = np.fft.fft(parts[i])
            for mult, fac in self._corrections[i]:
                acc += fac * np.real(np.fft.ifft(spec * mult))
            out[self.offsets[i]:self.offsets[i + 1]] = acc
        return out

    def apply(self, sigma):
        return np.asarray(sigma, dtype=float) - self.integral(sigma) / np.pi

    __call__ = apply

    def dense(self):
        """The full matrix of :meth:`apply`."""
        A = np.eye(self.size)
        for i, n in enumerate(self.sizes):
            oi = self.offsets[i]
            for j in range(len(self.sizes)):
                oj = self.offsets[j]
                A[oi:oi + n, oj:oj + self.sizes[j]] -= self._blocks[i][j] / np.pi
            idx = np.arange(n)
            # shift operator as a circulant: (S sigma)_j = sum_m c_{(m - j) mod n} sigma_m
            for mult, fac in self._corrections[i]:
                col = np.real(np.fft.ifft(mult))  # response to a unit spike at node 0
                circ = col[(idx[:, None] - idx[None, :]) % n][:, :]
                # row j of S is col[(j - m) mod n] at column m
                A[oi:oi + n, oi:oi + n] -= fac[:, None] * circ / np.pi
        return A


def apply_operator(sigma, curves: CurveSet, alpha, rule=10):
    """One application of the discrete operator (builds it on the fly)."""
    return BoundaryOperator(curves, alpha, rule).apply(sigma)


def build_rhs(f, u_p, alpha):
    """-2 alpha^2 (f - u_p), the right side of the discrete system."""
    f = np.asarray(f, dtype=float)
    u_p = np.asarray(u_p, dtype=float)
    if f.shape != u_p.shape:
        raise ConfigurationError(f"boundary data length {f.shape} != potential length {u_p.shape}")
    return -2.0 * alpha**2 * (f - u_p)


# ---------------------------------------------------------------- evaluation

NEAR_FACTOR = 5.0
UPSAMPLE = 16
NEAR_POINTS = 6


class LayerEvaluator:
    """Double-layer potential with a fixed curve set, alpha and targets.

    Targets at least ``5 h |y'|max`` from every curve use the trapezoid
    rule on the nodes; targets closer than that but beyond the same
    distance for a 16x Fourier-upsampled copy use the upsampled rule.
    With ``near='interpolate'`` the remaining targets get a polynomial
    along the normal through the boundary value (the interior limit,
    equal to the Dirichlet data ``g``) and upsampled-rule values farther
    in; with ``near='raise'`` they raise :class:`NearBoundaryError`.
    """

    def __init__(self, curves: CurveSet, alpha, targets, near="raise", tol=1e-12,
                 fast_threshold=2_000_000):
        if near not in ("raise", "interpolate"):
            raise ValueError("near must be 'raise' or 'interpolate'")
        self.curves = curves
        self.alpha = float(alpha)
        self.targets = np.atleast_2d(np.asarray(targets, dtype=float))
        self.near = near
        self.tol = tol
        self.fast_threshold = fast_threshold
        self.kernel = KernelSpec("K1", self.alpha)
        safe = [NEAR_FACTOR * c.h * g.speed.max() for c, g in zip(curves.curves, curves.geometry)]
        self.safe = np.array(safe)
        dist, cid, t = curves.nearest(self.targets, upper=max(safe))
        limit = np.where(cid >= 0, self.safe[np.maximum(cid, 0)], 0.0)
        self.far_idx = np.flatnonzero(~(dist < limit))
        close = np.flatnonzero(dist < limit)
        fine = self.safe / UPSAMPLE
        lim_fine = fine[cid[close]]
        self.band_idx = close[dist[close] >= lim_fine]
        self.near_idx = close[dist[close] < lim_fine]
        if len(self.near_idx) and near == "raise":
            raise NearBoundaryError(f"{len(self.near_idx)} targets closer than the accuracy guard")
        self._near_setup(dist, cid, t, fine)
        self._plans = {}

    def _sources(self, factor):
        pts, nrm, wts = [], [], []
        for c, g in zip(self.curves.curves, self.curves.geometry):
            if factor == 1:
                pts.append(c.nodes.T)
                nrm.append(g.normal.T)
                wts.append(c.h * g.speed)
            else:
                d1 = upsample(g.d1, factor)
                sp = np.hypot(d1[0], d1[1])
                pts.append(upsample(c.nodes, factor).T)
                nrm.append((c.normal_sign * np.stack([d1[1], -d1[0]]) / sp).T)
                wts.append(c.h / factor * sp)
        return np.vstack(pts), np.vstack(nrm), np.concatenate(wts)

    def _near_setup(self, dist, cid, t, fine):
        idx = self.near_idx
        self.near_curve = cid[idx]
        self.near_t = t[idx]
        self.near_s = dist[idx]
        m = NEAR_POINTS - 1
        self.near_samples = np.zeros((len(idx) * m, 2))
        self.near_nodes = np.zeros((len(idx), m))
        for k, (c, g) in enumerate(zip(self.curves.curves, self.curves.geometry)):
            sel = np.flatnonzero(cid[idx] == k)
            if len(sel) == 0:
                continue
            tk = t[idx[sel]]
            base = np.stack([fourier_interpolate(c.nodes[i], tk) for i in range(2)], axis=1)
            d1 = np.stack([fourier_interpolate(g.d1[i], tk) for i in range(2)], axis=1)
            nu = c.normal_sign * np.stack([d1[:, 1], -d1[:, 0]], axis=1) / np.hypot(d1[:, 0], d1[:, 1])[:, None]
            # sample points inward (away from nu) at s = d (1 + m/2)
            s_k = fine[k] * (1.0 + 0.5 * np.arange(m))
            self.near_nodes[sel] = s_k
            rows = (sel[:, None] * m + np.arange(m)).ravel()
            self.near_samples[rows] = (base[:, None, :] - s_k[None, :, None] * nu[:, None, :]).reshape(-1, 2)

    def _sum(self, key, targets, factor, sigma_parts):
        src, nrm, wts = self._sources(factor) if key not in self._plans else (None, None, None)
        q = []
        for c, s in zip(self.curves.curves, sigma_parts):
            q.append(s if factor == 1 else upsample(s, factor))
        q = np.concatenate(q)
        if len(targets) == 0:
            return np.zeros(0)
        if key not in self._plans:
            if len(targets) * len(src) <= self.fast_threshold:
                self._plans[key] = ("direct", src, nrm, wts)
            else:
                self._plans[key] = ("fmm", PointFMM(src, targets, self.kernel, self.tol, normals=nrm,
                                                       horizon="absolute"), wts)
        plan = self._plans[key]
        if plan[0] == "direct":
            _, src, nrm, wts = plan
            return sum_direct(src, targets, self.kernel, q * wts, nrm)
        return plan[1](q * plan[2])

    def __call__(self, sigma, g=None):
        """U^h at the targets for density ``sigma`` (flat, curves in order).

        ``g`` (flat, same layout) is the boundary value of U^h, needed only
        when near targets are interpolated.
        """
        sigma = np.asarray(sigma, dtype=float)
        sizes = [c.n for c in self.curves.curves]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        parts = [sigma[offs[k]:offs[k + 1]] for k in range(len(sizes))]
        out = np.zeros(len(self.targets))
        out[self.far_idx] = self._sum("far", self.targets[self.far_idx], 1, parts)
        out[self.band_idx] = self._sum("band", self.targets[self.band_idx], UPSAMPLE, parts)
        if len(self.near_idx):
            if g is None:
                raise ValueError("boundary values g are required for near targets")
            g = np.asarray(g, dtype=float)
            vals = self._sum("near", self.near_samples, UPSAMPLE, parts).reshape(len(self.near_idx), -1)
            gb = np.empty(len(self.near_idx))
            for k in range(len(self.curves.curves)):
                sel = self.near_curve == k
                if np.any(sel):
                    gb[sel] = fourier_interpolate(g[offs[k]:offs[k + 1]], self.near_t[sel])
            for m in range(len(self.near_idx)):
                xs = np.concatenate([[0.0], self.near_nodes[m]])
                ys = np.concatenate([[gb[m]], vals[m]])
                out[self.near_idx[m]] = _lagrange(xs, ys, self.near_s[m])
        return out


def _lagrange(xs, ys, x):
    tot = 0.0
    for i in range(len(xs)):
        li = 1.0
        for j in range(len(xs)):
            if j != i:
                li *= (x - xs[j]) / (xs[i] - xs[j])
        tot += li * ys[i]
    return tot


def eval_homogeneous(sigma, targets, curves: CurveSet, alpha, near="raise", g=None, tol=1e-12):
    """U^h at ``targets`` from density ``sigma``; see :class:`LayerEvaluator`."""
    return LayerEvaluator(curves, alpha, targets, near=near, tol=tol)(sigma, g)
