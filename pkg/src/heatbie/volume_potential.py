r"""Volume potential of a piecewise-cubic density on the quadtree.

    U^p(x) = \int_D G(x - y) B~(y) dy,    G(r) = K0(r / alpha) / (2 pi alpha^2)

B~ is the right-hand side extended from Omega to the unit square by
constants.  Each leaf carries a 10-term cubic fit of B~.  Interactions
between adjacent leaves use precomputed tables of moments
\int_leaf G(x_i - y) p_j dy (16 targets x 10 basis functions), computed
once per (level, relative position, alpha) by adaptive Gauss quadrature;
everything else goes through the Chebyshev FMM of ``fast_summation``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .fast_summation import ChebFMM, InteractionLists, cheb_order, screening_radius, tensor_basis
from .geometry import CurveSet
from .quadtree import SAMPLE_ETA, SAMPLE_XI, Leaf, QuadTree
from .special import k0_scalar

GAUSS_Q = 10
_GX, _GW = np.polynomial.legendre.leggauss(GAUSS_Q)
PANEL_ALPHA = 8.0


class QuadratureError(RuntimeError):
    pass


class ContinuityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ScreenedKernel:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        from .special import _k0_vec
        return _k0_vec(r / self.alpha) / (2 * np.pi * self.alpha**2)


# ---------------------------------------------------------------- extension

class ExtendedField:
    """B on Omega, constant C_k on the complementary piece next to curve k."""

    def __init__(self, B, constants, curves: CurveSet):
        if len(constants) != len(curves):
            raise ValueError("one extension constant per curve is required")
        self.B = B
        self.constants = tuple(float(c) for c in constants)
        self.curves = curves

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        comp = self.curves.component(points)
        out = np.empty(len(points))
        omega = comp < 0
        if np.any(omega):
            out[omega] = self.B(points[omega])
        for k, const in enumerate(self.constants):
            out[comp == k] = const
        return out


def extend_rhs(B, constants, curves: CurveSet, check=True, samples=64, offset=1e-6):
    """Extend ``B`` by the boundary constants; warns if B's trace disagrees
    with a constant by more than 1e-3 at sampled points just inside Omega."""
    ext = ExtendedField(B, constants, curves)
    if check:
        worst = 0.0
        for c, g, const in zip(curves.curves, curves.geometry, ext.constants):
            idx = np.linspace(0, c.n, samples, endpoint=False).astype(int)
            pts = (c.nodes[:, idx] - offset * g.normal[:, idx]).T
            worst = max(worst, float(np.max(np.abs(B(pts) - const))))
        if worst > 1e-3:
            warnings.warn(f"B does not match the extension constants at the boundary "
                          f"(max mismatch {worst:.2e})", ContinuityWarning, stacklevel=2)
        ext.mismatch = worst
    return ext


# ---------------------------------------------------------------- near integrals

@numba.njit(cache=True)
def _basis(xi, eta, out):
    out[0] = 1.0
    out[1] = xi
    out[2] = eta
    out[3] = xi * xi
    out[4] = xi * eta
    out[5] = eta * eta
    out[6] = xi * xi * xi
    out[7] = xi * xi * eta
    out[8] = xi * eta * eta
    out[9] = eta * eta * eta


@numba.njit(cache=True)
def _square_moments(tx, ty, cx, cy, width, alpha, gx, gw, cutoff, min_size, panel, out):
    r"""out[j] += \int_square K0(|t - y|/alpha) p_j((y - c)/width) dy.

    Adaptive dyadic splitting: a sub-square is integrated by tensor Gauss
    once the target is at least one sub-square width away and the
    sub-square is no wider than ``panel``; sub-squares beyond ``cutoff``
    are dropped, as are those below ``min_size`` (their contribution is
    O(s^2 log s)).  Returns the number of dropped tiny squares.
    """
    q = gx.shape[0]
    stack = np.empty((4 * 64 + 8, 3))
    top = 0
    stack[0, 0] = cx
    stack[0, 1] = cy
    stack[0, 2] = width
    top = 1
    pb = np.empty(10)
    inv_a = 1.0 / alpha
    dropped = 0
    while top > 0:
        top -= 1
        sx = stack[top, 0]
        sy = stack[top, 1]
        s = stack[top, 2]
        h = 0.5 * s
        ddx = max(abs(tx - sx) - h, 0.0)
        ddy = max(abs(ty - sy) - h, 0.0)
        d = math.sqrt(ddx * ddx + ddy * ddy)
        if d > cutoff:
            continue
        if d >= s and s <= panel:
            for a in range(q):
                yx = sx + h * gx[a]
                for b in range(q):
                    yy = sy + h * gx[b]
                    r = math.sqrt((tx - yx) ** 2 + (ty - yy) ** 2)
                    wk = gw[a] * gw[b] * h * h * k0_scalar(r * inv_a)
                    _basis((yx - cx) / width, (yy - cy) / width, pb)
                    for j in range(10):
                        out[j] += wk * pb[j]
            continue
        if s < min_size:
            dropped += 1
            continue
        q4 = 0.5 * h
        for k in range(4):
            stack[top, 0] = sx + (q4 if k & 1 else -q4)
            stack[top, 1] = sy + (q4 if k >> 1 else -q4)
            stack[top, 2] = h
            top += 1
    return dropped


@numba.njit(cache=True)
def _moments_many(targets, cx, cy, width, alpha, gx, gw, cutoff, min_size, panel):
    out = np.zeros((targets.shape[0], 10))
    for i in range(targets.shape[0]):
        _square_moments(targets[i, 0], targets[i, 1], cx, cy, width, alpha, gx, gw,
                        cutoff, min_size, panel, out[i])
    return out


def square_moments(targets, center, width, alpha, tol=1e-12):
    r"""Unnormalized moments \int K0(|x - y|/alpha) p_j dy, shape (n, 10).

    ``p_j`` are the leaf basis functions in the scaled coordinate
    (y - center) / width.
    """
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    cutoff = alpha * (math.log(1.0 / tol) + 12.0)
    min_size = 1e-7 * min(width, alpha)
    return _moments_many(t, float(center[0]), float(center[1]), float(width), float(alpha),
                         _GX, _GW, cutoff, min_size, PANEL_ALPHA * alpha)


def leaf_near_integral(leaf: Leaf, target, kernel: ScreenedKernel):
    r"""The 10 integrals \int_leaf G(target - y) p_j dy for the leaf's basis."""
    m = square_moments(np.asarray(target, dtype=float)[None], leaf.center, leaf.width, kernel.alpha)
    return m[0] / (2 * np.pi * kernel.alpha**2)


# ---------------------------------------------------------------- tables

def _rel_key(tree, t, s):
    """Translation-invariant description of target box t vs source box s."""
    lt, ls = int(tree.node_level[t]), int(tree.node_level[s])
    L = max(lt, ls)
    ox = (int(tree.node_ix[s]) << (L - ls)) - (int(tree.node_ix[t]) << (L - lt))
    oy = (int(tree.node_iy[s]) << (L - ls)) - (int(tree.node_iy[t]) << (L - lt))
    return (ls, lt - ls, ox, oy)


def _rel_keys(tree, t, s):
    lt, ls = tree.node_level[t], tree.node_level[s]
    L = np.maximum(lt, ls)
    ox = (tree.node_ix[s] << (L - ls)) - (tree.node_ix[t] << (L - lt))
    oy = (tree.node_iy[s] << (L - ls)) - (tree.node_iy[t] << (L - lt))
    return np.stack([ls, lt - ls, ox, oy], axis=1)


def _key_geometry(key):
    """Source center/width and target box lower-left corner/width for a key,
    with the source box's lower-left corner at the origin."""
    ls, dl, ox, oy = key
    ws = 0.5**ls
    wt = ws * 0.5**dl
    unit = min(ws, wt)
    # offsets are in units of the finer box, source minus target corner
    tx0, ty0 = -ox * unit, -oy * unit
    return np.array([0.5 * ws, 0.5 * ws]), ws, np.array([tx0, ty0]), wt


class MomentTables:
    """Cached moment tables for one alpha (reused across time steps)."""

    def __init__(self, alpha, p=None, tol=1e-12):
        self.alpha = float(alpha)
        self.tol = tol
        self.p = p
        self.near = {}   # key -> (16, 10): grid points of target leaf
        self.p2l = {}    # key -> (p2, 10): Chebyshev nodes of target box
        self.m2p = {}    # key -> (16, p2): grid points from source proxies

    def _grid_targets(self, corner, wt):
        return np.stack([corner[0] + wt * (0.5 + SAMPLE_XI), corner[1] + wt * (0.5 + SAMPLE_ETA)], axis=1)

    def near_table(self, key):
        tab = self.near.get(key)
        if tab is None:
            c, ws, corner, wt = _key_geometry(key)
            tab = square_moments(self._grid_targets(corner, wt), c, ws, self.alpha, self.tol)
            self.near[key] = tab
        return tab

    def p2l_table(self, key, nodes_x, nodes_y):
        tab = self.p2l.get(key)
        if tab is None:
            c, ws, corner, wt = _key_geometry(key)
            pts = np.stack([corner[0] + wt * (0.5 + 0.5 * nodes_x), corner[1] + wt * (0.5 + 0.5 * nodes_y)], axis=1)
            tab = square_moments(pts, c, ws, self.alpha, self.tol)
            self.p2l[key] = tab
        return tab

    def m2p_table(self, key, nodes_x, nodes_y):
        tab = self.m2p.get(key)
        if tab is None:
            c, ws, corner, wt = _key_geometry(key)
            tg = self._grid_targets(corner, wt)
            sx = c[0] + 0.5 * ws * nodes_x
            sy = c[1] + 0.5 * ws * nodes_y
            r = np.hypot(tg[:, None, 0] - sx[None, :], tg[:, None, 1] - sy[None, :])
            from .special import _k0_vec
            tab = _k0_vec(r / self.alpha)
            self.m2p[key] = tab
        return tab


_TABLE_CACHE: dict = {}


def moment_tables(alpha, tol=1e-12):
    """Process-wide table cache keyed by alpha."""
    key = (float(alpha), tol)
    tab = _TABLE_CACHE.get(key)
    if tab is None:
        if len(_TABLE_CACHE) > 16:
            _TABLE_CACHE.clear()
        tab = _TABLE_CACHE[key] = MomentTables(alpha, tol=tol)
    return tab


def _cheb_moment_matrix(p):
    r"""A[m, j] = \int_{[-1/2,1/2]^2} S_m(2 xi, 2 eta) p_j(xi, eta)."""
    x, w = np.polynomial.legendre.leggauss(p + 4)
    gx, gy = np.meshgrid(0.5 * x, 0.5 * x, indexing="ij")
    gw = np.outer(0.5 * w, 0.5 * w).ravel()
    gx, gy = gx.ravel(), gy.ravel()
    S = tensor_basis(p, 2 * gx, 2 * gy)  # (nq, p2)
    P = np.stack([np.ones_like(gx), gx, gy, gx * gx, gx * gy, gy * gy,
                  gx**3, gx * gx * gy, gx * gy * gy, gy**3], axis=1)
    return S.T @ (gw[:, None] * P)


# ---------------------------------------------------------------- evaluation

class VolumePotential:
    """Plan for U^p on a fixed tree; call with leaf coefficients (M, 10).

    ``backend='hierarchical'`` uses the FMM for well-separated pairs;
    ``'direct'`` integrates every non-adjacent (target, leaf) pair with the
    adaptive quadrature instead.  Adjacent pairs use the same tables in
    both.
    """

    def __init__(self, tree: QuadTree, kernel: ScreenedKernel, backend="hierarchical", tol=1e-10,
                 tables: MomentTables | None = None):
        if backend not in ("hierarchical", "direct"):
            raise ValueError(f"unknown backend {backend!r}")
        self.tree = tree
        self.kernel = kernel
        self.backend = backend
        self.tol = tol
        self.tables = tables if tables is not None else moment_tables(kernel.alpha)
        self.lists = InteractionLists(tree)
        self.cutoff = screening_radius(kernel.alpha, tol)
        lists = self.lists
        leaf_of = tree.leaf_index

        def live(a, b):
            ok = lists.box_gap(a, b) <= self.cutoff
            return a[ok], b[ok]

        ut, us = live(lists.u_tgt, lists.u_src)
        self._near = self._group(ut, us, leaf_of[ut], leaf_of[us], self.tables.near_table)
        if backend == "direct":
            return
        self.fmm = ChebFMM(tree, kernel.alpha, tol, length_scale=1.0, lists=lists)
        p = self.fmm.p
        nx, ny = self.fmm.node_x, self.fmm.node_y
        self.p2m = _cheb_moment_matrix(p)  # (p2, 10), times area
        self.l2p = tensor_basis(p, 2 * SAMPLE_XI, 2 * SAMPLE_ETA)  # (16, p2)
        wt, ws = live(lists.w_tgt, lists.w_src)
        isleaf = tree.children[ws, 0] < 0
        self._w_leaf = self._group(wt[isleaf], ws[isleaf], leaf_of[wt[isleaf]], leaf_of[ws[isleaf]],
                                   self.tables.near_table)
        self._w_box = self._group(wt[~isleaf], ws[~isleaf], leaf_of[wt[~isleaf]], ws[~isleaf],
                                  lambda k: self.tables.m2p_table(k, nx, ny))
        xt, xs = live(lists.x_tgt, lists.x_src)
        self._x = self._group(xt, xs, xt, leaf_of[xs], lambda k: self.tables.p2l_table(k, nx, ny))

    def _group(self, t_nodes, s_nodes, t_rows, s_rows, table):
        """Group pairs by relative key; returns [(table, t_rows, s_rows)]."""
        if len(t_nodes) == 0:
            return []
        keys = _rel_keys(self.tree, t_nodes, s_nodes)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        order = np.argsort(inv, kind="stable")
        bounds = np.searchsorted(inv[order], np.arange(len(uniq) + 1))
        groups = []
        for g, key in enumerate(uniq):
            idx = order[bounds[g]:bounds[g + 1]]
            groups.append((table(tuple(int(v) for v in key)), t_rows[idx], s_rows[idx]))
        return groups

    def __call__(self, coeffs):
        """Potential at the 16 grid points of every leaf, shape (M, 16)."""
        tree = self.tree
        c = np.asarray(coeffs, dtype=float)
        out = np.zeros((tree.n_leaves, 16))
        for tab, tr, sr in self._near:
            out[tr] += c[sr] @ tab.T
        if self.backend == "direct":
            out += self._direct_far(c)
        else:
            out += self._far(c)
        return out * (1.0 / (2 * np.pi * self.kernel.alpha**2))

    def _far(self, c):
        tree = self.tree
        fmm = self.fmm
        area = tree.leaf_width**2
        mult = (c @ self.p2m.T) * area[:, None]
        M = fmm.upward(mult)
        extra = np.zeros((tree.n_nodes, fmm.p2))
        for tab, tr, sr in self._x:
            extra[tr] += c[sr] @ tab.T
        L = fmm.downward(M, extra)
        out = L[tree.leaf_nodes] @ self.l2p.T
        for tab, tr, sr in self._w_leaf:
            out[tr] += c[sr] @ tab.T
        for tab, tr, sr in self._w_box:
            out[tr] += M[sr] @ tab.T
        return out

    def _direct_far(self, c):
        tree = self.tree
        pts = tree.grid_points().reshape(tree.n_leaves, 16, 2)
        out = np.zeros((tree.n_leaves, 16))
        adj = np.zeros((tree.n_leaves, tree.n_leaves), dtype=bool)
        lo = self.tree.leaf_index
        adj[lo[self.lists.u_tgt], lo[self.lists.u_src]] = True
        centers = tree.leaf_center
        widths = tree.leaf_width
        for s in range(tree.n_leaves):
            tgt = np.flatnonzero(~adj[:, s])
            if len(tgt) == 0:
                continue
            m = square_moments(pts[tgt].reshape(-1, 2), centers[s], widths[s], self.kernel.alpha,
                               self.tol * 1e-2)
            out[tgt] += (m @ c[s]).reshape(-1, 16)
        return out


def leaf_coefficients(tree: QuadTree):
    """Cubic fits (M, 10) of the tree's leaf values."""
    return tree.coeffs


def volume_potential_grid(tree: QuadTree, kernel: ScreenedKernel, backend="hierarchical", tol=1e-10):
    """U^p at every grid point (M, 16) for the density stored in ``tree``."""
    return VolumePotential(tree, kernel, backend, tol)(leaf_coefficients(tree))


def potential_on_boundary(tree: QuadTree, targets):
    """Evaluate the leaf fits of U^p (stored as tree values) at ``targets``."""
    return tree.evaluate(np.atleast_2d(targets))
