"""Fast sums of screened (modified Helmholtz) kernels.

Two kernel families are supported:

* ``"K0"``  -- potential   q * G(x - y),   G(r) = K0(r / alpha) / (2 pi alpha^2)
* ``"K1"``  -- dipole      q * dG/dn_y,    i.e. -(1/(2 pi alpha^3)) K1(r/alpha) (y - x).n / r

``sum_direct`` is the O(N M) reference.  ``sum_hierarchical`` runs a
kernel-independent FMM on an adaptive, 2:1 balanced quadtree: far fields
are tensor Chebyshev interpolants of the kernel (proxy charges /
proxy potentials), M2L operators are SVD-compressed per level, and every
interaction beyond the screening horizon ``alpha * (ln(1/tol) + 10)`` (for
point sums: beyond that distance past each target's nearest source) is
dropped.  The same engine (:class:`ChebFMM`) drives the volume potential,
where leaves carry polynomial densities instead of points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

from .quadtree import QuadTree, balance
from .special import k0_scalar, k1_scalar

FAMILIES = ("K0", "K1")
SMALL_CASE = 200


class CoincidentPointError(ValueError):
    pass


class UnsupportedToleranceError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    family: str
    alpha: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def prefactor(self):
        return 1.0 / (2 * np.pi * self.alpha**2)


def cheb_order(tol):
    """Chebyshev points per dimension for a target relative accuracy."""
    return max(6, int(math.ceil(math.log(1.0 / tol) / math.log(5.8))) + 3)


def screening_radius(alpha, tol):
    return alpha * (math.log(1.0 / tol) + 10.0)


# ------------------------------------------------------------------ kernels

@numba.njit(cache=True, inline="always")
def _kval(dipole, dx, dy, nx, ny, inv_alpha):
    r = math.sqrt(dx * dx + dy * dy)
    if dipole:
        # (x - y).n K1 / (alpha r) with (dx, dy) = x - y
        return k1_scalar(r * inv_alpha) * inv_alpha * (dx * nx + dy * ny) / r
    return k0_scalar(r * inv_alpha)


@numba.njit(cache=True)
def _direct(tx, ty, sx, sy, q, nx, ny, dipole, inv_alpha, cutoff):
    out = np.zeros(tx.shape[0])
    bad = 0
    c2 = cutoff * cutoff
    for i in range(tx.shape[0]):
        acc = 0.0
        for j in range(sx.shape[0]):
            dx = tx[i] - sx[j]
            dy = ty[i] - sy[j]
            r2 = dx * dx + dy * dy
            if r2 == 0.0:
                bad += 1
                continue
            if r2 > c2:
                continue
            acc += q[j] * _kval(dipole, dx, dy, nx[j], ny[j], inv_alpha)
        out[i] = acc
    return out, bad


@numba.njit(cache=True)
def _kernel_matrix(tx, ty, sx, sy, inv_alpha):
    out = np.empty((tx.shape[0], sx.shape[0]))
    for i in range(tx.shape[0]):
        for j in range(sx.shape[0]):
            dx = tx[i] - sx[j]
            dy = ty[i] - sy[j]
            out[i, j] = k0_scalar(math.sqrt(dx * dx + dy * dy) * inv_alpha)
    return out


def kernel_values(family, alpha, targets, sources, normals=None):
    """Dense kernel matrix (without the 1/(2 pi alpha^2) prefactor)."""
    t = np.asarray(targets, dtype=float)
    s = np.asarray(sources, dtype=float)
    dx = t[:, None, 0] - s[None, :, 0]
    dy = t[:, None, 1] - s[None, :, 1]
    r = np.hypot(dx, dy)
    from .special import _k0_vec, _k1_vec
    if family == "K0":
        return _k0_vec(r / alpha)
    return _k1_vec(r / alpha) / alpha * (dx * normals[None, :, 0] + dy * normals[None, :, 1]) / r


# ------------------------------------------------------------------ Chebyshev

def cheb_nodes(p):
    return np.cos((2 * np.arange(p) + 1) * np.pi / (2 * p))


def cheb_basis(p, x):
    """S_m(x) for m < p at points x in [-1, 1]; shape (len(x), p)."""
    nodes = cheb_nodes(p)
    x = np.asarray(x, dtype=float)
    k = np.arange(1, p)
    tx = np.cos(np.arccos(np.clip(x, -1, 1))[:, None] * k)
    tn = np.cos(np.arccos(nodes)[:, None] * k)
    return 1.0 / p + (2.0 / p) * tx @ tn.T


def cheb_basis_deriv(p, x):
    """d/dx S_m(x); shape (len(x), p)."""
    nodes = cheb_nodes(p)
    x = np.clip(np.asarray(x, dtype=float), -1, 1)
    k = np.arange(1, p)
    # T_k'(x) = k U_{k-1}(x) via recurrence (stable at the endpoints)
    u = np.zeros((len(x), p))
    u[:, 0] = 1.0
    if p > 1:
        u[:, 1] = 2 * x
    for j in range(2, p):
        u[:, j] = 2 * x * u[:, j - 1] - u[:, j - 2]
    dt = u[:, :p - 1] * k
    tn = np.cos(np.arccos(nodes)[:, None] * k)
    return (2.0 / p) * dt @ tn.T


def tensor_nodes(p):
    n = cheb_nodes(p)
    gx, gy = np.meshgrid(n, n, indexing="ij")
    return gx.ravel(), gy.ravel()


def tensor_basis(p, x, y):
    """S_m(x, y) on the tensor grid, shape (len(x), p*p)."""
    bx = cheb_basis(p, x)
    by = cheb_basis(p, y)
    return (bx[:, :, None] * by[:, None, :]).reshape(len(x), p * p)


# ------------------------------------------------------------------ lists

class InteractionLists:
    """U, V, W, X lists for a 2:1 balanced quadtree.

    Pairs are stored as (target node, source node) arrays.  V pairs also
    carry the integer offset (source - target) in units of the box width.
    """

    def __init__(self, tree: QuadTree):
        self.tree = tree
        lev = tree.node_level
        ix, iy = tree.node_ix, tree.node_iy
        n = tree.n_nodes
        leaf = tree.children[:, 0] < 0
        # colleagues: (n, 9), -1 where absent; ordering dx-major
        coll = np.full((n, 9), -1, dtype=np.int64)
        for l in range(tree.depth + 1):
            ids = np.arange(tree.level_offset[l], tree.level_offset[l + 1])
            keys = tree.level_keys[l]
            m = 2**l
            c = 0
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    qx, qy = ix[ids] + dx, iy[ids] + dy
                    ok = (qx >= 0) & (qy >= 0) & (qx < m) & (qy < m)
                    k = (qx << 32) | qy
                    pos = np.searchsorted(keys, k)
                    pos = np.minimum(pos, len(keys) - 1)
                    hit = ok & (keys[pos] == k)
                    coll[ids[hit], c] = tree.level_offset[l] + pos[hit]
                    c += 1
        self.colleagues = coll

        def adjacent(a, b):
            # boxes a, b (node ids, arrays) touch or overlap
            la, lb = lev[a], lev[b]
            L = np.maximum(la, lb)
            ax0 = ix[a] << (L - la)
            ay0 = iy[a] << (L - la)
            bx0 = ix[b] << (L - lb)
            by0 = iy[b] << (L - lb)
            aw = 1 << (L - la)
            bw = 1 << (L - lb)
            return ((ax0 <= bx0 + bw) & (bx0 <= ax0 + aw)
                    & (ay0 <= by0 + bw) & (by0 <= ay0 + aw))

        nodes = np.arange(n)
        has_parent = tree.parent >= 0
        # V: children of parent's colleagues, not adjacent
        tgt = np.repeat(nodes[has_parent], 36)
        pc = coll[tree.parent[nodes[has_parent]]]  # (k, 9)
        ch = tree.children[np.maximum(pc, 0)]  # (k, 9, 4)
        ch = np.where((pc >= 0)[:, :, None], ch, -1).reshape(-1)
        ok = ch >= 0
        t, s = tgt[ok], ch[ok]
        far = ~adjacent(t, s)
        self.v_tgt, self.v_src = t[far], s[far]
        self.v_off = np.stack([ix[self.v_src] - ix[self.v_tgt], iy[self.v_src] - iy[self.v_tgt]], axis=1)
        # X: leaves among parent's colleagues, not adjacent
        tgt = np.repeat(nodes[has_parent], 9)
        pcf = pc.reshape(-1)
        ok = pcf >= 0
        t, s = tgt[ok], pcf[ok]
        isl = leaf[s]
        t, s = t[isl], s[isl]
        sel = ~adjacent(t, s)
        self.x_tgt, self.x_src = t[sel], s[sel]
        # U pieces for leaves
        leaves = tree.leaf_nodes
        u_t, u_s = [], []
        c = coll[leaves]
        t = np.repeat(leaves, 9)
        cf = c.reshape(-1)
        ok = cf >= 0
        t0, s0 = t[ok], cf[ok]
        isl = leaf[s0]
        u_t.append(t0[isl])
        u_s.append(s0[isl])
        # children of non-leaf colleagues: adjacent -> U, else -> W
        t1, s1 = t0[~isl], s0[~isl]
        t1 = np.repeat(t1, 4)
        s1 = tree.children[s1].reshape(-1)
        adj = adjacent(t1, s1)
        u_t.append(t1[adj])
        u_s.append(s1[adj])
        self.w_tgt, self.w_src = t1[~adj], s1[~adj]
        # coarser adjacent leaves (parent's colleagues)
        hp = tree.parent[leaves] >= 0
        t2 = np.repeat(leaves[hp], 9)
        s2 = coll[tree.parent[leaves[hp]]].reshape(-1)
        ok = s2 >= 0
        t2, s2 = t2[ok], s2[ok]
        ok = leaf[s2]
        t2, s2 = t2[ok], s2[ok]
        adj = adjacent(t2, s2)
        u_t.append(t2[adj])
        u_s.append(s2[adj])
        self.u_tgt = np.concatenate(u_t)
        self.u_src = np.concatenate(u_s)
        if len(leaves) == 1:
            self.u_tgt = leaves.copy()
            self.u_src = leaves.copy()

    def box_gap(self, a, b):
        """Euclidean gap between boxes a and b (0 when touching)."""
        tree = self.tree
        ca, cb = tree.node_center[a], tree.node_center[b]
        ha = 0.5 * tree.node_width[a]
        hb = 0.5 * tree.node_width[b]
        d = np.maximum(np.abs(ca - cb) - (ha + hb)[:, None], 0.0)
        return np.hypot(d[:, 0], d[:, 1])


# ------------------------------------------------------------------ engine

_M2L_CACHE: dict = {}


def m2l_operators(width_over_alpha, p, tol):
    """Compressed M2L operators for boxes of width w = width_over_alpha * alpha.

    The kernel K0(r/alpha) between the Chebyshev nodes of two boxes only
    depends on w/alpha, so the operators are cached process-wide.
    Returns dict(U, V, C) with C[offset] = U^T K_offset V.
    """
    key = (round(float(width_over_alpha), 12), p, tol)
    ops = _M2L_CACHE.get(key)
    if ops is not None:
        return ops
    w = float(width_over_alpha)
    h = 0.5 * w
    nx, ny = tensor_nodes(p)
    offs = [(dx, dy) for dx in range(-3, 4) for dy in range(-3, 4) if max(abs(dx), abs(dy)) >= 2]
    mats = {o: _kernel_matrix(h * nx, h * ny, h * nx + o[0] * w, h * ny + o[1] * w, 1.0)
            for o in offs}
    fat = np.hstack(list(mats.values()))
    thin = np.vstack(list(mats.values()))
    # QR first: the SVD then only sees p^2 x p^2 factors
    uf, sf, _ = np.linalg.svd(np.linalg.qr(fat.T, mode="r").T, full_matrices=False)
    _, st, vt = np.linalg.svd(np.linalg.qr(thin, mode="r"), full_matrices=False)
    eps = tol * 1e-2
    ru = max(1, int(np.sum(sf > eps * max(sf[0], 1e-300))))
    rv = max(1, int(np.sum(st > eps * max(st[0], 1e-300))))
    U = uf[:, :ru]
    V = vt[:rv].T
    ops = dict(U=U, V=V, C={o: U.T @ m @ V for o, m in mats.items()})
    if len(_M2L_CACHE) > 256:
        _M2L_CACHE.clear()
    _M2L_CACHE[key] = ops
    return ops


class ChebFMM:
    """Far-field machinery (upward, M2L, downward) for one tree and alpha.

    Coordinates are those of the tree (the unit square) scaled by
    ``length_scale``; ``alpha`` is in physical units.  Multipoles are
    Chebyshev proxy charges (p*p per box) and locals are potential values
    at the Chebyshev nodes of a box.  All kernel values exclude the
    1/(2 pi alpha^2) prefactor.
    """

    def __init__(self, tree, alpha, tol=1e-10, p=None, length_scale=1.0, lists=None,
                 node_cutoff=None):
        self.tree = tree
        self.alpha = float(alpha)
        self.tol = tol
        self.scale = length_scale
        if p is None:
            p = cheb_order(tol)
        self.p = p
        self.lists = lists if lists is not None else InteractionLists(tree)
        self.cutoff = screening_radius(self.alpha, tol)
        lists = self.lists
        gap = lists.box_gap(lists.v_tgt, lists.v_src) * length_scale
        keep = gap <= (self.cutoff if node_cutoff is None else node_cutoff[lists.v_tgt])
        self.v_tgt, self.v_src, self.v_off = lists.v_tgt[keep], lists.v_src[keep], lists.v_off[keep]
        nx, ny = tensor_nodes(p)
        self.node_x, self.node_y = nx, ny
        # M2M matrices child k -> parent, shape (p2, p2): parent[m] += M[k] @ child
        self.m2m = []
        # separable factors: m2m[k] = kron(S[k & 1], S[k >> 1]).T
        n1 = cheb_nodes(p)
        self._s1d = [cheb_basis(p, 0.5 * n1 - 0.5), cheb_basis(p, 0.5 * n1 + 0.5)]
        for k in range(4):
            cx = 0.5 * nx + (0.5 if k & 1 else -0.5)
            cy = 0.5 * ny + (0.5 if k >> 1 else -0.5)
            self.m2m.append(tensor_basis(p, cx, cy).T)
        self._level_ops = {}

    @property
    def p2(self):
        return self.p * self.p

    def box_nodes(self, nodes):
        """Physical coordinates of the Chebyshev nodes of boxes, (k, p2, 2)."""
        c = self.tree.node_center[nodes] * self.scale
        h = 0.5 * self.tree.node_width[nodes] * self.scale
        return np.stack([c[:, None, 0] + h[:, None] * self.node_x,
                         c[:, None, 1] + h[:, None] * self.node_y], axis=-1)

    def _ops(self, level):
        """SVD-compressed M2L operators for one level."""
        ops = self._level_ops.get(level)
        if ops is None:
            w = 0.5**level * self.scale
            ops = self._level_ops[level] = m2l_operators(w / self.alpha, self.p, self.tol)
        return ops

    def upward(self, leaf_multipoles):
        """Multipoles of all nodes from those of the leaves (tree leaf order)."""
        tree = self.tree
        M = np.zeros((tree.n_nodes, self.p2))
        M[tree.leaf_nodes] = leaf_multipoles
        for l in range(tree.depth, 0, -1):
            ids = np.arange(tree.level_offset[l], tree.level_offset[l + 1])
            ids = ids[tree.children[ids, 0] >= 0]
            p = self.p
            for k in range(4):
                sx, sy = self._s1d[k & 1], self._s1d[k >> 1]
                ch = M[tree.children[ids, k]].reshape(-1, p, p)
                M[ids] += (sx.T @ (ch @ sy)).reshape(-1, p * p)
        return M

    def far_field(self, leaf_multipoles, extra_local=None):
        """Upward + downward; returns (node multipoles, node locals)."""
        M = self.upward(leaf_multipoles)
        return M, self.downward(M, extra_local)

    def downward(self, M, extra_local=None):
        """Chebyshev-node potentials of every node: V-list M2L at each level,
        then L2L to the children, coarse to fine.  ``extra_local`` holds
        contributions added beforehand (e.g. X-list P2L)."""
        tree = self.tree
        L = np.zeros((tree.n_nodes, self.p2)) if extra_local is None else extra_local.copy()
        vlev = tree.node_level[self.v_tgt]
        p = self.p
        for l in range(0, tree.depth + 1):
            lo, hi = tree.level_offset[l], tree.level_offset[l + 1]
            ids = np.arange(lo, hi)
            sel = vlev == l
            if np.any(sel):
                ops = self._ops(l)
                Mc = M[lo:hi] @ ops["V"]
                Lc = np.zeros((hi - lo, ops["U"].shape[1]))
                t, s, off = self.v_tgt[sel] - lo, self.v_src[sel] - lo, self.v_off[sel]
                code = (off[:, 0] + 3) * 7 + (off[:, 1] + 3)
                order = np.argsort(code, kind="stable")
                bounds = np.searchsorted(code[order], np.arange(50))
                for c in range(49):
                    a, b = bounds[c], bounds[c + 1]
                    if a == b:
                        continue
                    idx = order[a:b]
                    # one source per target for a fixed offset: no repeated rows
                    Lc[t[idx]] += Mc[s[idx]] @ ops["C"][(c // 7 - 3, c % 7 - 3)].T
                L[lo:hi] += Lc @ ops["U"].T
            par = ids[tree.children[ids, 0] >= 0]
            if len(par) == 0:
                continue
            Lp = L[par].reshape(-1, p, p)
            for k in range(4):
                sx, sy = self._s1d[k & 1], self._s1d[k >> 1]
                L[tree.children[par, k]] += (sx @ Lp @ sy.T).reshape(-1, p * p)
        return L


# ------------------------------------------------------------------ point API

def _as_points(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2)")
    return a


def sum_direct(sources, targets, kernel: KernelSpec, strengths, normals=None, cutoff=np.inf):
    """Reference O(N M) summation in fixed source order (prefactor included)."""
    s = _as_points(sources, "sources")
    t = _as_points(targets, "targets")
    q = np.asarray(strengths, dtype=float)
    dip = kernel.family == "K1"
    n = np.zeros_like(s) if normals is None else np.asarray(normals, dtype=float)
    if dip and normals is None:
        raise ValueError("dipole family needs normals")
    out, bad = _direct(t[:, 0].copy(), t[:, 1].copy(), s[:, 0].copy(), s[:, 1].copy(), q,
                       n[:, 0].copy(), n[:, 1].copy(), dip, 1.0 / kernel.alpha, cutoff)
    if bad:
        raise CoincidentPointError(f"{bad} target/source coincidences")
    return kernel.prefactor * out


def point_tree(points, leaf_size=40, max_depth=22):
    """Balanced adaptive quadtree over points already mapped to [0, 1]^2."""
    pts = np.asarray(points)
    level = []
    lx, ly = [], []
    ix = np.zeros(1, dtype=np.int64)
    iy = np.zeros(1, dtype=np.int64)
    cur = np.zeros(len(pts), dtype=np.int64)  # index into the active node list
    for l in range(max_depth + 1):
        counts = np.bincount(cur, minlength=len(ix)) if len(cur) else np.zeros(len(ix), int)
        split = (counts > leaf_size) & (l < max_depth)
        level.append(np.full(int((~split).sum()), l))
        lx.append(ix[~split])
        ly.append(iy[~split])
        if not np.any(split):
            break
        new_id = np.full(len(ix), -1)
        new_id[split] = np.arange(int(split.sum()))
        sx, sy = ix[split], iy[split]
        ix = np.concatenate([2 * sx + (k & 1) for k in range(4)])
        iy = np.concatenate([2 * sy + (k >> 1) for k in range(4)])
        keep = split[cur]
        pts_k = pts[keep]
        par = new_id[cur[keep]]
        scale = 2.0 ** (l + 1)
        bx = np.clip(np.floor(pts_k[:, 0] * scale).astype(np.int64), 0, 2 ** (l + 1) - 1) & 1
        by = np.clip(np.floor(pts_k[:, 1] * scale).astype(np.int64), 0, 2 ** (l + 1) - 1) & 1
        nsplit = int(split.sum())
        cur = (bx + 2 * by) * nsplit + par
        pts = pts_k
    level = np.concatenate(level)
    lx, ly = np.concatenate(lx), np.concatenate(ly)
    level, lx, ly = balance(level, lx, ly)
    return QuadTree(level, lx, ly)


@numba.njit(cache=True)
def _node_table(nodes, p):
    t = np.empty((p, p))
    for k in range(p):
        for a in range(p):
            t[k, a] = math.cos(k * math.acos(nodes[a]))
    return t


@numba.njit(cache=True)
def _p2m_points(s_ptr, sx, sy, q, nx, ny, cx, cy, h, p, nodes, dipole, out):
    """Proxy charges of each leaf from its points (Chebyshev anterpolation)."""
    tnode = _node_table(nodes, p)
    tk = np.empty(p)
    tkx = np.empty(p)
    tky = np.empty(p)
    dkx = np.empty(p)
    dky = np.empty(p)
    for leaf in range(s_ptr.shape[0] - 1):
        for j in range(s_ptr[leaf], s_ptr[leaf + 1]):
            u = (sx[j] - cx[leaf]) / h[leaf]
            v = (sy[j] - cy[leaf]) / h[leaf]
            u = min(1.0, max(-1.0, u))
            v = min(1.0, max(-1.0, v))
            for a in range(p):
                tkx[a] = 0.0
                tky[a] = 0.0
                dkx[a] = 0.0
                dky[a] = 0.0
            # S_a(u) = 1/p + 2/p sum_k T_k(u) T_k(node_a)
            t0u, t1u = 1.0, u
            t0v, t1v = 1.0, v
            du0, du1 = 0.0, 1.0
            dv0, dv1 = 0.0, 1.0
            for a in range(p):
                tkx[a] = 1.0 / p
                tky[a] = 1.0 / p
            for k in range(1, p):
                if k == 1:
                    tu, tv, du, dv = t1u, t1v, du1, dv1
                else:
                    tu = 2 * u * t1u - t0u
                    tv = 2 * v * t1v - t0v
                    du = 2 * t1u + 2 * u * du1 - du0
                    dv = 2 * t1v + 2 * v * dv1 - dv0
                    t0u, t1u = t1u, tu
                    t0v, t1v = t1v, tv
                    du0, du1 = du1, du
                    dv0, dv1 = dv1, dv
                for a in range(p):
                    tn = tnode[k, a]
                    tkx[a] += 2.0 / p * tu * tn
                    tky[a] += 2.0 / p * tv * tn
                    dkx[a] += 2.0 / p * du * tn
                    dky[a] += 2.0 / p * dv * tn
            for a in range(p):
                for b in range(p):
                    if dipole:
                        w = (nx[j] * dkx[a] * tky[b] + ny[j] * tkx[a] * dky[b]) / h[leaf]
                    else:
                        w = tkx[a] * tky[b]
                    out[leaf, a * p + b] += q[j] * w


@numba.njit(cache=True)
def _l2p_points(t_ptr, tx, ty, cx, cy, h, p, nodes, L, out):
    tnode = _node_table(nodes, p)
    sa = np.empty(p)
    sb = np.empty(p)
    for leaf in range(t_ptr.shape[0] - 1):
        for i in range(t_ptr[leaf], t_ptr[leaf + 1]):
            u = min(1.0, max(-1.0, (tx[i] - cx[leaf]) / h[leaf]))
            v = min(1.0, max(-1.0, (ty[i] - cy[leaf]) / h[leaf]))
            for a in range(p):
                sa[a] = 1.0 / p
                sb[a] = 1.0 / p
            t0u, t1u = 1.0, u
            t0v, t1v = 1.0, v
            for k in range(1, p):
                if k == 1:
                    tu, tv = t1u, t1v
                else:
                    tu = 2 * u * t1u - t0u
                    tv = 2 * v * t1v - t0v
                    t0u, t1u = t1u, tu
                    t0v, t1v = t1v, tv
                for a in range(p):
                    tn = tnode[k, a]
                    sa[a] += 2.0 / p * tu * tn
                    sb[a] += 2.0 / p * tv * tn
            acc = 0.0
            for a in range(p):
                for b in range(p):
                    acc += sa[a] * sb[b] * L[leaf, a * p + b]
            out[i] += acc


@numba.njit(cache=True)
def _p2p_ranges(pairs, tx, ty, sx, sy, q, nx, ny, dipole, inv_alpha, cut2, out):
    """out[t_lo:t_hi] += sources[s_lo:s_hi] for each (t_lo, t_hi, s_lo, s_hi).

    ``cut2`` is the squared horizon of each target.  Pairs are processed
    in the given (fixed) order; returns the number of exact coincidences
    skipped.
    """
    bad = 0
    for k in range(pairs.shape[0]):
        for i in range(pairs[k, 0], pairs[k, 1]):
            x = tx[i]
            y = ty[i]
            c2 = cut2[i]
            acc = 0.0
            for j in range(pairs[k, 2], pairs[k, 3]):
                dx = x - sx[j]
                dy = y - sy[j]
                r2 = dx * dx + dy * dy
                if r2 == 0.0:
                    bad += 1
                    continue
                if r2 > c2:
                    continue
                acc += q[j] * _kval(dipole, dx, dy, nx[j], ny[j], inv_alpha)
            out[i] += acc
    return bad


@numba.njit(cache=True)
def _m2p(pairs, boxes, tx, ty, px, py, M, inv_alpha, cut2, out):
    """out[t_lo:t_hi] += proxy charges of box, for each ((t_lo, t_hi), box)."""
    for k in range(pairs.shape[0]):
        b = boxes[k]
        for i in range(pairs[k, 0], pairs[k, 1]):
            c2 = cut2[i]
            acc = 0.0
            for m in range(px.shape[1]):
                dx = tx[i] - px[b, m]
                dy = ty[i] - py[b, m]
                r2 = dx * dx + dy * dy
                if r2 > c2:
                    continue
                acc += M[b, m] * k0_scalar(math.sqrt(r2) * inv_alpha)
            out[i] += acc


@numba.njit(cache=True)
def _p2l(boxes, pairs, sx, sy, q, nx, ny, px, py, dipole, inv_alpha, cut2, L):
    """Chebyshev-node potentials of box from sources[s_lo:s_hi]; ``cut2``
    is the squared horizon per box."""
    for k in range(boxes.shape[0]):
        b = boxes[k]
        c2 = cut2[b]
        for m in range(px.shape[1]):
            acc = 0.0
            for j in range(pairs[k, 0], pairs[k, 1]):
                dx = px[b, m] - sx[j]
                dy = py[b, m] - sy[j]
                r2 = dx * dx + dy * dy
                if r2 > c2:
                    continue
                acc += q[j] * _kval(dipole, dx, dy, nx[j], ny[j], inv_alpha)
            L[b, m] += acc


def _csr(owner, n):
    order = np.argsort(owner, kind="stable")
    ptr = np.searchsorted(owner[order], np.arange(n + 1))
    return order, ptr


def node_ranges(tree, leaf_ptr):
    """Point range [lo, hi) of every node given per-leaf CSR pointers.

    Leaves are in depth-first order, so each subtree owns a contiguous
    block of points.
    """
    lo = np.full(tree.n_nodes, np.iinfo(np.int64).max, dtype=np.int64)
    hi = np.zeros(tree.n_nodes, dtype=np.int64)
    lo[tree.leaf_nodes] = leaf_ptr[:-1]
    hi[tree.leaf_nodes] = leaf_ptr[1:]
    for l in range(tree.depth, 0, -1):
        ids = np.arange(tree.level_offset[l], tree.level_offset[l + 1])
        par = tree.parent[ids]
        np.minimum.at(lo, par, lo[ids])
        np.maximum.at(hi, par, hi[ids])
    return lo, hi


class PointFMM:
    """Reusable plan for sums with fixed source and target positions.

    W- and X-list interactions fall back to direct point sums whenever
    the box holds fewer points than it has Chebyshev proxies.

    ``horizon="relative"`` widens the screening horizon of each target by
    its distance to the nearest source, so dropped terms are small relative
    to the target's own value (the pointwise-relative contract).
    ``horizon="absolute"`` uses the fixed horizon: dropped terms are below
    ``tol`` times a unit-scale field, which is all a solver needs and is
    much cheaper for targets far from every source.
    """

    def __init__(self, sources, targets, kernel: KernelSpec, tol=1e-8, leaf_size=40,
                 normals=None, horizon="relative"):
        if tol < 1e-14:
            raise UnsupportedToleranceError("tolerance below 1e-14 is not supported")
        if horizon not in ("relative", "absolute"):
            raise ValueError("horizon must be 'relative' or 'absolute'")
        self.kernel = kernel
        self.tol = tol
        s = _as_points(sources, "sources")
        t = _as_points(targets, "targets")
        allp = np.vstack([s, t])
        lo = allp.min(axis=0)
        size = float((allp.max(axis=0) - lo).max())
        size = size * (1 + 1e-9) if size > 0 else 1.0
        self.lo, self.size = lo, size
        s_u = (s - lo) / size
        t_u = (t - lo) / size
        tree = point_tree(np.vstack([s_u, t_u]), leaf_size)
        self.tree = tree
        nl = tree.n_leaves
        self.s_order, s_ptr = _csr(tree.locate(np.clip(s_u, 0, 1)), nl)
        self.t_order, t_ptr = _csr(tree.locate(np.clip(t_u, 0, 1)), nl)
        self.s_ptr, self.t_ptr = s_ptr, t_ptr
        self.sx = s[self.s_order, 0].copy()
        self.sy = s[self.s_order, 1].copy()
        self.tx = t[self.t_order, 0].copy()
        self.ty = t[self.t_order, 1].copy()
        self.dipole = kernel.family == "K1"
        if self.dipole:
            if normals is None:
                raise ValueError("dipole family needs normals")
            nrm = np.asarray(normals, dtype=float)[self.s_order]
        else:
            nrm = np.zeros((len(s), 2))
        self.nx, self.ny = nrm[:, 0].copy(), nrm[:, 1].copy()
        base = screening_radius(kernel.alpha, tol)
        if horizon == "relative":
            near, _ = cKDTree(s).query(t[self.t_order])
            cut = base + near
        else:
            cut = np.full(len(t), base)
        self.cut2 = cut * cut
        # per node: the widest horizon among its targets (box gaps never
        # exceed point distances, so pruning by it is safe)
        node_cut = np.full(tree.n_nodes, base)
        leaf_max = np.array([cut[a:b].max() if b > a else base
                             for a, b in zip(t_ptr[:-1], t_ptr[1:])])
        node_cut[tree.leaf_nodes] = leaf_max
        for l in range(tree.depth, 0, -1):
            ids = np.arange(tree.level_offset[l], tree.level_offset[l + 1])
            np.maximum.at(node_cut, tree.parent[ids], node_cut[ids])
        # P2L evaluates at proxy nodes anywhere in the box: add its diagonal
        box_cut = node_cut + np.sqrt(2.0) * tree.node_width * size if horizon == "relative" \
            else node_cut
        self.box_cut2 = box_cut * box_cut
        self.fmm = fmm = ChebFMM(tree, kernel.alpha, tol, length_scale=size,
                                 node_cutoff=node_cut)
        lists = fmm.lists
        p2 = fmm.p2
        s_lo, s_hi = node_ranges(tree, s_ptr)
        t_lo, t_hi = node_ranges(tree, t_ptr)
        ns, nt = s_hi - s_lo, t_hi - t_lo

        def live(a, b):
            ok = lists.box_gap(a, b) * size <= node_cut[a]
            return a[ok], b[ok]

        def ranges(tt, ss):
            return np.stack([t_lo[tt], t_hi[tt], s_lo[ss], s_hi[ss]], axis=1)

        ut, us = live(lists.u_tgt, lists.u_src)
        wt, ws = live(lists.w_tgt, lists.w_src)
        xt, xs = live(lists.x_tgt, lists.x_src)
        w_direct = ns[ws] <= p2
        x_direct = nt[xt] <= p2
        direct = np.vstack([ranges(ut, us), ranges(wt[w_direct], ws[w_direct]),
                            ranges(xt[x_direct], xs[x_direct])])
        direct = direct[(direct[:, 0] < direct[:, 1]) & (direct[:, 2] < direct[:, 3])]
        # fixed processing order: by target range, then source range
        self.direct = direct[np.lexsort((direct[:, 2], direct[:, 0]))]
        wt, ws = wt[~w_direct], ws[~w_direct]
        keep = nt[wt] > 0
        self.m2p_pairs = np.stack([t_lo[wt[keep]], t_hi[wt[keep]]], axis=1)
        self.m2p_box = ws[keep]
        xt, xs = xt[~x_direct], xs[~x_direct]
        keep = ns[xs] > 0
        self.p2l_box = xt[keep]
        self.p2l_pairs = np.stack([s_lo[xs[keep]], s_hi[xs[keep]]], axis=1)
        lc = tree.leaf_center * size + lo
        self.leaf_cx, self.leaf_cy = lc[:, 0].copy(), lc[:, 1].copy()
        self.leaf_h = 0.5 * tree.leaf_width * size
        self.nodes1d = cheb_nodes(fmm.p)
        nodes_all = fmm.box_nodes(np.arange(tree.n_nodes))
        self.px = nodes_all[:, :, 0] + lo[0]
        self.py = nodes_all[:, :, 1] + lo[1]
        self.n_targets = len(t)

    def __call__(self, strengths):
        fmm = self.fmm
        tree = self.tree
        q = np.asarray(strengths, dtype=float)[self.s_order].copy()
        inv_a = 1.0 / self.kernel.alpha
        mult = np.zeros((tree.n_leaves, fmm.p2))
        _p2m_points(self.s_ptr, self.sx, self.sy, q, self.nx, self.ny, self.leaf_cx,
                    self.leaf_cy, self.leaf_h, fmm.p, self.nodes1d, self.dipole, mult)
        M = fmm.upward(mult)
        extra = np.zeros((tree.n_nodes, fmm.p2))
        _p2l(self.p2l_box, self.p2l_pairs, self.sx, self.sy, q, self.nx, self.ny,
             self.px, self.py, self.dipole, inv_a, self.box_cut2, extra)
        L = fmm.downward(M, extra)
        out = np.zeros(self.n_targets)
        _l2p_points(self.t_ptr, self.tx, self.ty, self.leaf_cx, self.leaf_cy, self.leaf_h,
                    fmm.p, self.nodes1d, L[tree.leaf_nodes], out)
        _m2p(self.m2p_pairs, self.m2p_box, self.tx, self.ty, self.px, self.py, M, inv_a,
             self.cut2, out)
        bad = _p2p_ranges(self.direct, self.tx, self.ty, self.sx, self.sy, q, self.nx, self.ny,
                          self.dipole, inv_a, self.cut2, out)
        if bad:
            raise CoincidentPointError(f"{bad} target/source coincidences")
        res = np.empty(self.n_targets)
        res[self.t_order] = out
        return self.kernel.prefactor * res


def sum_hierarchical(sources, targets, kernel: KernelSpec, strengths, normals=None, tol=1e-8,
                     leaf_size=40):
    """FMM summation matching :func:`sum_direct` to relative ``tol``.

    Problems with at most 200 sources are passed straight to
    :func:`sum_direct`.
    """
    if tol < 1e-14:
        raise UnsupportedToleranceError("tolerance below 1e-14 is not supported")
    if len(sources) <= SMALL_CASE:
        return sum_direct(sources, targets, kernel, strengths, normals)
    plan = PointFMM(sources, targets, kernel, tol, leaf_size, normals)
    return plan(strengths)
