import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatbie.special import (EULER_GAMMA, DomainError, RootNotFoundError, bessel_first_second,
                             cross_product, find_lambda, modified_bessel_k, oracle_residuals,
                             oracle_table, K_RTOL, J_RTOL)


def test_k_reference_values():
    assert modified_bessel_k(0, 1.0) == pytest.approx(0.421024438240708, rel=1e-14)
    assert modified_bessel_k(1, 1.0) == pytest.approx(0.601907230197235, rel=1e-14)


def test_k0_log_asymptote():
    x = 1e-6
    assert modified_bessel_k(0, x) / (-math.log(x / 2) - EULER_GAMMA) == pytest.approx(1, rel=1e-4)


@pytest.mark.parametrize("x", [0.0, -1.0, np.nan])
def test_k_domain(x):
    with pytest.raises(DomainError):
        modified_bessel_k(0, x)


def test_k_unsupported_order():
    with pytest.raises(DomainError):
        modified_bessel_k(2, 1.0)


def test_k_underflow_is_zero():
    assert modified_bessel_k(0, 701.0) == 0.0
    assert modified_bessel_k(1, 1e4) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-8, 700.0))
def test_k_matches_mpmath(x):
    for order in (0, 1):
        ref = float(mpmath.besselk(order, x))
        assert abs(modified_bessel_k(order, x) - ref) <= K_RTOL * abs(ref)


def test_k_series_asymptotic_seam():
    for order in (0, 1):
        lo, hi = modified_bessel_k(order, np.nextafter(2.0, 0)), modified_bessel_k(order, 2.0)
        assert abs(lo - hi) <= 1e-13 * hi


def test_k_monotone():
    x = np.sort(np.logspace(-8, np.log10(600), 2000))
    for order in (0, 1):
        assert np.all(np.diff(modified_bessel_k(order, x)) < 0)


@pytest.mark.parametrize("x", [0.5, 1.0, 2.0, 5.0])
def test_k0_derivative_is_minus_k1(x):
    h = 1e-5
    fd = (modified_bessel_k(0, x + h) - modified_bessel_k(0, x - h)) / (2 * h)
    assert abs(fd + modified_bessel_k(1, x)) <= 1e-6 * abs(modified_bessel_k(1, x))


def test_j0_y0_values():
    assert bessel_first_second("J0", 0.0) == 1.0
    assert abs(bessel_first_second("J0", 2.404825557695773)) <= 1e-12
    assert bessel_first_second("Y0", 1.0) == pytest.approx(0.088256964215677, rel=1e-12)


def test_y0_domain():
    with pytest.raises(DomainError):
        bessel_first_second("Y0", 0.0)
    with pytest.raises(ValueError):
        bessel_first_second("K0", 1.0)


def test_oracle_table_and_residuals():
    rows = oracle_table()
    assert {r[0] for r in rows} >= {"K0", "K1", "J0", "Y0"}
    res = oracle_residuals()
    for name, errs in res.items():
        tol = K_RTOL if name.startswith("K") else J_RTOL
        assert max(e for _, e in errs) <= tol, name


def test_find_lambda():
    lam = find_lambda(0.1, 0.4, 10.0)
    assert round(lam, 3) == 10.244
    assert abs(cross_product(lam, 0.1, 0.4)) <= 1e-12
    f = lambda l: (mpmath.bessely(0, 0.1 * l) * mpmath.besselj(0, 0.4 * l)
                   - mpmath.besselj(0, 0.1 * l) * mpmath.bessely(0, 0.4 * l))
    with mpmath.workdps(40):
        ref = float(mpmath.findroot(f, lam))
    assert lam == pytest.approx(ref, rel=1e-12)


def test_find_lambda_errors():
    with pytest.raises(DomainError):
        find_lambda(0.4, 0.1, 10.0)
    with pytest.raises(RootNotFoundError):
        find_lambda(0.1, 0.4, 5.0, bracket_width=0.1)
