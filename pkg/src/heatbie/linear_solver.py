"""Unrestarted GMRES with classical Gram-Schmidt applied twice."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

log = logging.getLogger(__name__)


class LinearityError(ValueError):
    pass


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list)


def check_linearity(apply, n, rng=None, tol=1e-12):
    """Spot-check apply(a x + b y) == a apply(x) + b apply(y)."""
    rng = np.random.default_rng(rng)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    a, b = rng.standard_normal(2)
    lhs = apply(a * x + b * y)
    rhs = a * apply(x) + b * apply(y)
    scale = max(np.linalg.norm(rhs), 1e-300)
    if np.linalg.norm(lhs - rhs) > tol * scale:
        raise LinearityError("operator is not linear to the checked tolerance")


def gmres(apply, rhs, tol=1e-10, max_iter=200, x0=None, debug=False):
    """Solve apply(x) = rhs; returns (x, SolveReport).

    Convergence is ||rhs - apply(x)|| <= tol ||rhs||.  If ``max_iter`` is
    reached the iterate with the smallest residual is returned with
    ``converged=False``.
    """
    b = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side is not finite")
    n = b.size
    if debug:
        check_linearity(apply, n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True, [0.0])
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    r0 = b - apply(x0) if np.any(x0) else b.copy()
    beta = np.linalg.norm(r0)
    m = min(max_iter, n)
    V = np.zeros((m + 1, n))
    H = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    g[0] = beta
    V[0] = r0 / beta
    history = [beta / bnorm]
    k = 0
    for k in range(1, m + 1):
        w = apply(V[k - 1])
        for _ in range(2):  # CGS2
            c = V[:k] @ w
            w = w - c @ V[:k]
            H[:k, k - 1] += c
        hn = np.linalg.norm(w)
        H[k, k - 1] = hn
        if hn > 0:
            V[k] = w / hn
        # Givens rotations
        for i in range(k - 1):
            t = cs[i] * H[i, k - 1] + sn[i] * H[i + 1, k - 1]
            H[i + 1, k - 1] = -sn[i] * H[i, k - 1] + cs[i] * H[i + 1, k - 1]
            H[i, k - 1] = t
        a, bb = H[k - 1, k - 1], H[k, k - 1]
        rho = np.hypot(a, bb)
        cs[k - 1], sn[k - 1] = (a / rho, bb / rho) if rho > 0 else (1.0, 0.0)
        H[k - 1, k - 1] = rho
        H[k, k - 1] = 0.0
        g[k] = -sn[k - 1] * g[k - 1]
        g[k - 1] = cs[k - 1] * g[k - 1]
        res = abs(g[k]) / bnorm
        history.append(res)
        log.debug("gmres it %d residual %.3e", k, res)
        if res <= tol or hn == 0:
            break
    y = solve_triangular(H[:k, :k], g[:k])
    x = x0 + y @ V[:k]
    true_res = np.linalg.norm(b - apply(x)) / bnorm
    # residual norms are monotone in k, so the last iterate is the best one
    converged = true_res <= tol
    if not converged:
        log.warning("gmres: no convergence after %d iterations (residual %.2e)", k, true_res)
    return x, SolveReport(k, float(true_res), bool(converged), history)
