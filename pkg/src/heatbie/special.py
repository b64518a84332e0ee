"""Bessel functions K0, K1, J0, Y0.

K0 and K1 sit in the inner loops of every kernel evaluation, so they are
written as numba scalar functions (``k0_scalar``/``k1_scalar``) that other
jitted code can call directly.  Small arguments use the power series,
arguments >= 2 use a Chebyshev expansion of ``exp(x) sqrt(x) K_n(x)``
in ``4/x - 1`` (coefficients in ``_bessel_tables``, produced by
``tools/gen_bessel_tables.py``).

J0 and Y0 are only needed for the analytic annulus solution and come from
scipy.
"""
from __future__ import annotations

import enum
import math

import numba
import numpy as np
from scipy import optimize, special as sps

from ._bessel_tables import K0_CHEB, K1_CHEB

EULER_GAMMA = 0.57721566490153286061
UNDERFLOW_X = 700.0
SERIES_MAX_X = 2.0


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


class RootNotFoundError(RuntimeError):
    pass


class BesselKind(enum.Enum):
    K0 = "K0"
    K1 = "K1"
    J0 = "J0"
    Y0 = "Y0"


@numba.njit(cache=True, inline="always")
def _clenshaw(c, t):
    b0 = 0.0
    b1 = 0.0
    t2 = 2.0 * t
    for j in range(c.shape[0] - 1, 0, -1):
        b0, b1 = c[j] + t2 * b0 - b1, b0
    return c[0] + t * b0 - b1


@numba.njit(cache=True)
def k0_scalar(x):
    if x > UNDERFLOW_X:
        return 0.0
    if x <= SERIES_MAX_X:
        q = 0.25 * x * x
        term = 1.0
        i0 = 1.0
        harm = 0.0
        rest = 0.0
        for k in range(1, 40):
            term *= q / (k * k)
            harm += 1.0 / k
            i0 += term
            rest += term * harm
            if term < 1e-18 * i0:
                break
        return -(math.log(0.5 * x) + EULER_GAMMA) * i0 + rest
    t = 4.0 / x - 1.0
    return math.exp(-x) / math.sqrt(x) * _clenshaw(K0_CHEB, t)


@numba.njit(cache=True)
def k1_scalar(x):
    if x > UNDERFLOW_X:
        return 0.0
    if x <= SERIES_MAX_X:
        q = 0.25 * x * x
        # term_k = q^k / (k! (k+1)!)
        term = 1.0
        psi_sum = 1.0 - 2.0 * EULER_GAMMA  # psi(1) + psi(2)
        i1 = 1.0
        rest = psi_sum
        hk = 0.0
        for k in range(1, 40):
            term *= q / (k * (k + 1.0))
            hk += 1.0 / k
            psi_sum = 2.0 * (hk - EULER_GAMMA) + 1.0 / (k + 1.0)
            i1 += term
            rest += term * psi_sum
            if term < 1e-18 * i1:
                break
        half = 0.5 * x
        return 1.0 / x + math.log(half) * half * i1 - 0.5 * half * rest
    t = 4.0 / x - 1.0
    return math.exp(-x) / math.sqrt(x) * _clenshaw(K1_CHEB, t)


@numba.vectorize(["float64(float64)"], cache=True)
def _k0_vec(x):
    return k0_scalar(x)


@numba.vectorize(["float64(float64)"], cache=True)
def _k1_vec(x):
    return k1_scalar(x)


def _check_positive(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)) or np.any(x <= 0):
        raise DomainError("K0/K1 need x > 0")
    return x


def modified_bessel_k(order, x):
    """K_order(x) for order 0 or 1, elementwise over ``x`` (x > 0)."""
    x = _check_positive(x)
    if order == 0:
        out = _k0_vec(x)
    elif order == 1:
        out = _k1_vec(x)
    else:
        raise DomainError(f"unsupported order {order}")
    return out[()] if out.ndim == 0 else out


def bessel_first_second(kind, x):
    """J0 or Y0 elementwise; Y0 requires x > 0."""
    kind = BesselKind(kind)
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)):
        raise DomainError("NaN argument")
    if kind is BesselKind.J0:
        out = sps.j0(x)
    elif kind is BesselKind.Y0:
        if np.any(x <= 0):
            raise DomainError("Y0 needs x > 0")
        out = sps.y0(x)
    else:
        raise DomainError(f"{kind} is not J0/Y0")
    return out[()] if np.ndim(out) == 0 else out


def cross_product(lam, r_inner, r_outer):
    """Y0(r_i lam) J0(r_o lam) - J0(r_i lam) Y0(r_o lam)."""
    return (sps.y0(r_inner * lam) * sps.j0(r_outer * lam)
            - sps.j0(r_inner * lam) * sps.y0(r_outer * lam))


def find_lambda(r_inner, r_outer, guess, bracket_width=1.0):
    """Root of the annulus cross-product nearest ``guess``.

    The root is bracketed by scanning outwards from ``guess`` in steps of
    ``bracket_width / 8`` up to ``bracket_width`` on each side.
    """
    if not 0 < r_inner < r_outer:
        raise DomainError("need 0 < r_inner < r_outer")
    f = lambda lam: cross_product(lam, r_inner, r_outer)
    step = bracket_width / 8
    for k in range(1, 9):
        lo, hi = guess - k * step, guess + k * step
        if lo <= 0:
            lo = step * 1e-3
        for a, b in ((lo, guess), (guess, hi)):
            if f(a) * f(b) <= 0:
                return optimize.brentq(f, a, b, xtol=1e-15, rtol=1e-15, maxiter=200)
    raise RootNotFoundError(f"no sign change within {bracket_width} of {guess}")


# ------------------------------------------------------------ oracle checks

K_RTOL = 1e-13
J_RTOL = 1e-12


def oracle_table():
    """The shipped multiprecision oracle: list of (function, x, value)."""
    from importlib.resources import files

    text = files("heatbie").joinpath("data/bessel_oracle.csv").read_text()
    rows = []
    for line in text.splitlines()[1:]:
        name, x, v = line.split(",")
        rows.append((name, float(x), float(v)))
    return rows


def oracle_residuals():
    """Scaled error of every shipped K0/K1/J0/Y0 value, keyed by function.

    K errors are relative.  J0/Y0 errors are measured against
    max(|value|, sqrt(2/(pi x))) so that points near a zero are judged
    by the local oscillation amplitude rather than the (tiny) value.
    """
    out = {}
    for name, x, v in oracle_table():
        if name in ("K0", "K1"):
            got = modified_bessel_k(int(name[1]), x)
            err = abs(got - v) / abs(v)
        elif name in ("J0", "Y0"):
            got = bessel_first_second(name, x)
            err = abs(got - v) / max(abs(v), np.sqrt(2 / (np.pi * x)))
        else:
            continue
        out.setdefault(name, []).append((x, err))
    return out
