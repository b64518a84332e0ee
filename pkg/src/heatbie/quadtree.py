"""Adaptive quadtree on the unit square with cubic leaf fits.

Every leaf carries its field on a cell-centred 4x4 grid and the 10
least-squares coefficients of a cubic in the leaf-local scaled coordinate
xi = (x - center) / width, xi in [-1/2, 1/2]^2.  The basis order is

    1, x, y, x^2, xy, y^2, x^3, x^2 y, x y^2, y^3.

Nodes are addressed by (level, ix, iy); node (l, i, j) covers
[i, i+1] x [j, j+1] * 2^-l.  Child k of a node has x-bit ``k & 1`` and
y-bit ``k >> 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

GRID_1D = (np.arange(4) + 0.5) / 4 - 0.5
CHILD_GRID_1D = (np.arange(8) + 0.5) / 8 - 0.5
N_COEFFS = 10
DEGREES = np.array([0, 1, 1, 2, 2, 2, 3, 3, 3, 3])


class DomainError(ValueError):
    pass


class RefinementBudgetError(RuntimeError):
    pass


def cubic_basis(xi, eta):
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    one = np.ones_like(xi)
    return np.stack([one, xi, eta, xi * xi, xi * eta, eta * eta,
                     xi**3, xi * xi * eta, xi * eta * eta, eta**3], axis=-1)


def _tensor(g):
    gx, gy = np.meshgrid(g, g, indexing="ij")
    return gx.ravel(), gy.ravel()


SAMPLE_XI, SAMPLE_ETA = _tensor(GRID_1D)
SAMPLE_BASIS = cubic_basis(SAMPLE_XI, SAMPLE_ETA)  # (16, 10)
FIT_MATRIX = np.linalg.pinv(SAMPLE_BASIS)  # (10, 16)
CHILD_XI, CHILD_ETA = _tensor(CHILD_GRID_1D)
CHILD_BASIS = cubic_basis(CHILD_XI, CHILD_ETA)  # (64, 10)


def _child_slices():
    # rows of the 64 child-centre samples that belong to child k, in the
    # child's own 16-sample order
    idx = np.arange(64).reshape(8, 8)
    out = []
    for k in range(4):
        dx, dy = k & 1, k >> 1
        out.append(idx[4 * dx:4 * dx + 4, 4 * dy:4 * dy + 4].ravel())
    return np.array(out)


CHILD_ROWS = _child_slices()


def fit_leaf_polynomial(values, half_width=None):
    """Least-squares cubic coefficients (scaled basis) of 16 samples.

    ``values`` may be (16,) or (m, 16).  ``half_width`` is accepted for
    interface symmetry; the scaled basis makes the fit width independent.
    """
    values = np.asarray(values, dtype=float)
    return values @ FIT_MATRIX.T


@dataclass
class Leaf:
    center: np.ndarray
    half_width: float
    level: int
    values: np.ndarray
    coeffs: np.ndarray

    @property
    def width(self):
        return 2 * self.half_width

    def sample_points(self):
        return np.stack([self.center[0] + self.width * SAMPLE_XI,
                         self.center[1] + self.width * SAMPLE_ETA], axis=1)


def eval_leaf(leaf, x):
    """Evaluate a leaf's cubic at points inside its (closed) square."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rel = (x - leaf.center) / leaf.width
    if np.any(np.abs(rel) > 0.5 + 1e-12):
        raise DomainError("point outside leaf; extrapolation is not allowed")
    out = cubic_basis(rel[:, 0], rel[:, 1]) @ leaf.coeffs
    return out if len(out) > 1 else out[0]


@njit(cache=True)
def _descend(px, py, children, cx, cy, leaf_index):
    out = np.empty(px.size, dtype=np.int64)
    for i in range(px.size):
        v = 0
        while children[v, 0] >= 0:
            k = (1 if px[i] > cx[v] else 0) + (2 if py[i] > cy[v] else 0)
            v = children[v, k]
        out[i] = leaf_index[v]
    return out


@njit(cache=True)
def _eval_cubic(px, py, leaf_ids, leaf_nodes, cx, cy, width, coeffs):
    out = np.empty(px.size)
    for i in range(px.size):
        li = leaf_ids[i]
        v = leaf_nodes[li]
        x = (px[i] - cx[v]) / width[v]
        y = (py[i] - cy[v]) / width[v]
        c = coeffs[li]
        out[i] = (c[0] + x * (c[1] + x * (c[3] + x * c[6]) + y * (c[4] + x * c[7]))
                  + y * (c[2] + y * (c[5] + x * c[8] + y * c[9])))
    return out


def _key(ix, iy):
    return (np.asarray(ix, dtype=np.int64) << 32) | np.asarray(iy, dtype=np.int64)


class QuadTree:
    """Leaf-complete quadtree; arrays are indexed by node id.

    ``leaf_nodes`` lists the node ids of the leaves in depth-first
    (Morton) order; per-leaf arrays (``values``, ``coeffs``) follow that
    order.
    """

    def __init__(self, level, ix, iy, values=None, tau=None, max_level=None, min_level=0):
        level = np.asarray(level, dtype=np.int64)
        ix = np.asarray(ix, dtype=np.int64)
        iy = np.asarray(iy, dtype=np.int64)
        self.tau = tau
        self.max_level = max_level
        self.min_level = min_level
        self._build_nodes(level, ix, iy)
        self.values = None
        self.coeffs = None
        if values is not None:
            self.set_values(values)

    # -- structure ---------------------------------------------------------
    def _build_nodes(self, level, ix, iy):
        lev, nx, ny = [0], [0], [0]
        depth = int(level.max()) if len(level) else 0
        # all ancestors of the leaves are the internal nodes
        per_level = []
        for l in range(depth + 1):
            sel = level >= l
            shift = (level[sel] - l)
            keys = np.unique(_key(ix[sel] >> shift, iy[sel] >> shift))
            per_level.append(keys)
        node_keys = []
        node_level = []
        for l, keys in enumerate(per_level):
            node_keys.append(keys)
            node_level.append(np.full(len(keys), l))
        self.depth = depth
        self.level_keys = per_level
        offsets = np.cumsum([0] + [len(k) for k in per_level])
        self.level_offset = offsets
        n = offsets[-1]
        keys = np.concatenate(node_keys)
        self.node_level = np.concatenate(node_level)
        self.node_ix = keys >> 32
        self.node_iy = keys & 0xFFFFFFFF
        self.children = np.full((n, 4), -1, dtype=np.int64)
        self.parent = np.full(n, -1, dtype=np.int64)
        for l in range(1, depth + 1):
            ids = np.arange(offsets[l], offsets[l + 1])
            pk = _key(self.node_ix[ids] >> 1, self.node_iy[ids] >> 1)
            pid = offsets[l - 1] + np.searchsorted(per_level[l - 1], pk)
            ck = (self.node_ix[ids] & 1) + 2 * (self.node_iy[ids] & 1)
            self.children[pid, ck] = ids
            self.parent[ids] = pid
        is_leaf = self.children[:, 0] < 0
        internal_partial = (~is_leaf) & np.any(self.children < 0, axis=1)
        if np.any(internal_partial):
            raise ValueError("leaf set does not tile the square")
        # depth-first (Morton) order of leaves
        order = []
        stack = [0]
        while stack:
            v = stack.pop()
            if is_leaf[v]:
                order.append(v)
            else:
                stack.extend(self.children[v, ::-1].tolist())
        self.leaf_nodes = np.array(order, dtype=np.int64)
        self.leaf_index = np.full(n, -1, dtype=np.int64)
        self.leaf_index[self.leaf_nodes] = np.arange(len(order))
        self.node_width = 0.5 ** self.node_level
        self.node_center = np.stack([(self.node_ix + 0.5) * self.node_width,
                                     (self.node_iy + 0.5) * self.node_width], axis=1)

    @property
    def n_nodes(self):
        return len(self.node_level)

    @property
    def n_leaves(self):
        return len(self.leaf_nodes)

    @property
    def leaf_level(self):
        return self.node_level[self.leaf_nodes]

    @property
    def leaf_center(self):
        return self.node_center[self.leaf_nodes]

    @property
    def leaf_width(self):
        return self.node_width[self.leaf_nodes]

    def is_leaf(self, node):
        return self.children[node, 0] < 0

    def signature(self):
        """Hashable description of the leaf set (used for caching)."""
        lv = self.leaf_level
        return hash((lv.tobytes(), self.node_ix[self.leaf_nodes].tobytes(),
                     self.node_iy[self.leaf_nodes].tobytes()))

    def same_structure(self, other):
        return (self.n_leaves == other.n_leaves
                and np.array_equal(self.leaf_nodes, other.leaf_nodes)
                and np.array_equal(self.node_level, other.node_level)
                and np.array_equal(self.node_ix, other.node_ix)
                and np.array_equal(self.node_iy, other.node_iy))

    def grid_points(self):
        """All leaf sample points, shape (M*16, 2), leaf-major."""
        c = self.leaf_center
        w = self.leaf_width[:, None]
        return np.stack([c[:, 0:1] + w * SAMPLE_XI, c[:, 1:2] + w * SAMPLE_ETA], axis=-1).reshape(-1, 2)

    def grid_levels(self):
        return np.repeat(self.leaf_level, 16)

    # -- data ----------------------------------------------------------------
    def set_values(self, values):
        values = np.asarray(values, dtype=float).reshape(self.n_leaves, 16)
        self.values = values
        self.coeffs = fit_leaf_polynomial(values)
        return self

    def with_values(self, values):
        """A tree sharing this structure but carrying other grid values."""
        twin = object.__new__(QuadTree)
        twin.__dict__.update(self.__dict__)
        return twin.set_values(values)

    def leaf(self, i):
        node = self.leaf_nodes[i]
        return Leaf(self.node_center[node].copy(), 0.5 * self.node_width[node],
                    int(self.node_level[node]),
                    None if self.values is None else self.values[i],
                    None if self.coeffs is None else self.coeffs[i])

    def fit_residual(self):
        """Max |fit - sample| over each leaf's own 16 samples."""
        return np.abs(self.coeffs @ SAMPLE_BASIS.T - self.values).max(axis=1)

    # -- queries -------------------------------------------------------------
    def locate(self, points):
        """Leaf index of each point; edges go to the lower-indexed side."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if np.any(pts < 0) or np.any(pts > 1) or np.any(np.isnan(pts)):
            raise DomainError("point outside the unit square")
        return _descend(np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]),
                        self.children, self.node_center[:, 0].copy(),
                        self.node_center[:, 1].copy(), self.leaf_index)

    def locate_leaf(self, x):
        return self.leaf(int(self.locate(np.asarray(x)[None])[0]))

    def evaluate(self, points, leaf_ids=None):
        """Evaluate the piecewise-cubic field at arbitrary points of D."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if leaf_ids is None:
            leaf_ids = self.locate(pts)
        return _eval_cubic(np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]),
                           np.asarray(leaf_ids, dtype=np.int64), self.leaf_nodes,
                           self.node_center[:, 0].copy(), self.node_center[:, 1].copy(),
                           self.node_width, np.ascontiguousarray(self.coeffs))

    def dump(self, path):
        """One row per leaf: level, cx, cy, half_width, then the 16 values."""
        c = self.leaf_center
        cols = [self.leaf_level[:, None], c, 0.5 * self.leaf_width[:, None]]
        if self.values is not None:
            cols.append(self.values)
        header = "level,cx,cy,half_width" + "".join(f",v{k}" for k in range(16 if self.values is not None else 0))
        np.savetxt(path, np.hstack(cols), delimiter=",", header=header, comments="",
                   fmt=["%d"] + ["%.17g"] * (sum(a.shape[1] for a in cols) - 1))


# ------------------------------------------------------------------ building

def _sample(field, level, ix, iy, xi, eta):
    w = 0.5 ** level
    cx = (ix + 0.5) * w
    cy = (iy + 0.5) * w
    x = cx[:, None] + w[:, None] * xi[None, :]
    y = cy[:, None] + w[:, None] * eta[None, :]
    return np.asarray(field(x.ravel(), y.ravel()), dtype=float).reshape(x.shape)


def build_tree(field, tau, max_level, min_level=2, max_leaves=400_000):
    """Adaptively refine the unit square for ``field(x, y)``.

    A node is split when its cubic fit misses the field by more than ``tau``
    at the 64 cell centres of its would-be children (or when it is above
    ``min_level``), down to ``max_level``.  The result is 2:1 balanced
    across edges and corners.
    """
    if min_level > max_level:
        raise ValueError("min_level > max_level")
    known = {}  # (level) -> dict key -> 16 values

    def remember(level, ix, iy, vals):
        d = known.setdefault(level, {})
        for k, v in zip(_key(ix, iy).tolist(), vals):
            d[k] = v

    leaves_l, leaves_x, leaves_y = [], [], []
    ix = np.array([0], dtype=np.int64)
    iy = np.array([0], dtype=np.int64)
    vals = _sample(field, np.zeros(1, dtype=np.int64), ix, iy, SAMPLE_XI, SAMPLE_ETA)
    n_leaves = 0
    for l in range(max_level + 1):
        if len(ix) == 0:
            break
        lev = np.full(len(ix), l, dtype=np.int64)
        remember(l, ix, iy, vals)
        if l == max_level:
            split = np.zeros(len(ix), dtype=bool)
        else:
            child_vals = _sample(field, lev, ix, iy, CHILD_XI, CHILD_ETA)
            coeffs = vals @ FIT_MATRIX.T
            err = np.abs(coeffs @ CHILD_BASIS.T - child_vals).max(axis=1)
            split = (err > tau) | (l < min_level)
        keep = ~split
        leaves_l.append(lev[keep])
        leaves_x.append(ix[keep])
        leaves_y.append(iy[keep])
        n_leaves += int(keep.sum()) + 4 * int(split.sum())
        if n_leaves > max_leaves:
            raise RefinementBudgetError(f"refinement needs more than {max_leaves} leaves")
        if not np.any(split):
            ix = ix[:0]
            break
        sx, sy, cv = ix[split], iy[split], child_vals[split]
        nix, niy, nvals = [], [], []
        for k in range(4):
            nix.append(2 * sx + (k & 1))
            niy.append(2 * sy + (k >> 1))
            nvals.append(cv[:, CHILD_ROWS[k]])
        ix = np.concatenate(nix)
        iy = np.concatenate(niy)
        vals = np.concatenate(nvals)
    level = np.concatenate(leaves_l)
    lx = np.concatenate(leaves_x)
    ly = np.concatenate(leaves_y)
    level, lx, ly = balance(level, lx, ly)
    if len(level) > max_leaves:
        raise RefinementBudgetError(f"balanced tree exceeds {max_leaves} leaves")
    tree = QuadTree(level, lx, ly, tau=tau, max_level=max_level, min_level=min_level)
    # fill leaf values, evaluating only leaves created by balancing
    tl = tree.leaf_level
    tx = tree.node_ix[tree.leaf_nodes]
    ty = tree.node_iy[tree.leaf_nodes]
    values = np.empty((tree.n_leaves, 16))
    missing = []
    for i, (l, k) in enumerate(zip(tl.tolist(), _key(tx, ty).tolist())):
        v = known.get(l, {}).get(k)
        if v is None:
            missing.append(i)
        else:
            values[i] = v
    if missing:
        m = np.array(missing)
        values[m] = _sample(field, tl[m], tx[m], ty[m], SAMPLE_XI, SAMPLE_ETA)
    return tree.set_values(values)


def uniform_tree(level):
    n = 2**level
    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return QuadTree(np.full(n * n, level), ix.ravel(), iy.ravel(), min_level=level, max_level=level)


def balance(level, ix, iy):
    """Smallest refinement of a leaf set that is 2:1 balanced.

    Uses the closure rule: if a node exists at level l, all eight
    neighbours of its parent exist at level l-1 (together with sibling
    completeness), processed from the finest level upwards.
    """
    depth = int(level.max())
    sets = [set() for _ in range(depth + 1)]
    for l in range(depth + 1):
        sel = level >= l
        sh = level[sel] - l
        sets[l].update(_key(ix[sel] >> sh, iy[sel] >> sh).tolist())
    for l in range(depth, 0, -1):
        keys = np.fromiter(sets[l], dtype=np.int64, count=len(sets[l]))
        px = np.unique(keys >> 32 >> 1 << 32 | (keys & 0xFFFFFFFF) >> 1)
        pxi = px >> 32
        pyi = px & 0xFFFFFFFF
        n = 2 ** (l - 1)
        add = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                qx, qy = pxi + dx, pyi + dy
                ok = (qx >= 0) & (qy >= 0) & (qx < n) & (qy < n)
                add.append(_key(qx[ok], qy[ok]))
        sets[l - 1].update(np.concatenate(add).tolist())
        # sibling completeness at level l - 1 is implied by its parents at
        # level l - 2 being split; enforce it explicitly
        keys = np.fromiter(sets[l - 1], dtype=np.int64, count=len(sets[l - 1]))
        bx = (keys >> 32) >> 1 << 1
        by = (keys & 0xFFFFFFFF) >> 1 << 1
        sib = [_key(bx + (k & 1), by + (k >> 1)) for k in range(4)]
        sets[l - 1].update(np.concatenate(sib).tolist())
    # sibling completeness at the finest level
    for l in range(1, depth + 1):
        keys = np.fromiter(sets[l], dtype=np.int64, count=len(sets[l]))
        bx = (keys >> 32) >> 1 << 1
        by = (keys & 0xFFFFFFFF) >> 1 << 1
        sets[l].update(np.concatenate([_key(bx + (k & 1), by + (k >> 1)) for k in range(4)]).tolist())
    out_l, out_x, out_y = [], [], []
    for l in range(depth + 1):
        keys = np.array(sorted(sets[l]), dtype=np.int64)
        if l < depth:
            nxt = np.fromiter(sets[l + 1], dtype=np.int64, count=len(sets[l + 1]))
            parents = np.unique(((nxt >> 32) >> 1) << 32 | ((nxt & 0xFFFFFFFF) >> 1))
            keys = keys[~np.isin(keys, parents)]
        out_l.append(np.full(len(keys), l))
        out_x.append(keys >> 32)
        out_y.append(keys & 0xFFFFFFFF)
    return np.concatenate(out_l), np.concatenate(out_x), np.concatenate(out_y)


def is_balanced(tree):
    """True when edge/corner-adjacent leaves differ by at most one level."""
    lv = tree.leaf_level
    c = tree.leaf_center
    w = tree.leaf_width
    for i in np.flatnonzero(lv >= 0):
        # probe points just outside the leaf around its perimeter
        eps = w[i] * 1e-6
        offs = []
        for t in np.linspace(-0.5, 0.5, 9):
            offs += [(t, -0.5), (t, 0.5), (-0.5, t), (0.5, t)]
        offs = np.array(offs)
        pts = c[i] + offs * w[i] + np.sign(offs) * (np.abs(offs) == 0.5) * eps
        pts = pts[np.all((pts > 0) & (pts < 1), axis=1)]
        if len(pts) == 0:
            continue
        nb = tree.locate(pts)
        if np.any(np.abs(lv[nb] - lv[i]) > 1):
            return False
    return True
