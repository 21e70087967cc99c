from __future__ import annotations

from math import gamma, lgamma, log, exp, pi, sqrt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geobeams.spectral import (
    cluster_linf_growth,
    critical_exponent,
    delta_exponent,
    exponent_fit,
    highest_weight,
    lattice_cluster,
    lattice_points,
    lp_norm,
    normalized_legendre,
    torus_mode,
    zonal,
)
from geobeams.tolerances import DomainError

# ||zonal(10)||_4 by adaptive quadrature of scipy's Legendre polynomial (frozen)
ZONAL10_L4 = 0.7014244608896719


def test_critical_exponents():
    assert critical_exponent(2) == 6.0
    assert critical_exponent(3) == 4.0


@pytest.mark.parametrize("n", [2, 3, 4])
def test_delta_branches_meet(n):
    pc = critical_exponent(n)
    lo = (n - 1) / 4 - (n - 1) / (2 * pc)
    hi = (n - 1) / 2 - n / pc
    assert delta_exponent(pc, n) == pytest.approx(lo, abs=1e-15)
    assert delta_exponent(pc, n) == pytest.approx(hi, abs=1e-15)
    assert delta_exponent(2, n) == 0
    assert delta_exponent(np.inf, n) == (n - 1) / 2


@given(st.integers(2, 6), st.floats(2, 200), st.floats(2, 200))
def test_delta_monotone(n, p, q):
    if p <= q:
        assert delta_exponent(p, n) <= delta_exponent(q, n) + 1e-15


def test_delta_domain():
    with pytest.raises(DomainError):
        delta_exponent(1.5, 2)
    with pytest.raises(DomainError):
        critical_exponent(1)


def test_legendre_matches_scipy():
    from scipy.special import eval_legendre

    x = np.linspace(-1, 1, 101)
    for ell in (0, 1, 7, 40):
        assert np.allclose(normalized_legendre(ell, x), np.sqrt((2 * ell + 1) / 2) * eval_legendre(ell, x), atol=1e-12)


@pytest.mark.parametrize("fam", [zonal(5), zonal(30), highest_weight(5), highest_weight(30), torus_mode((2, 3)), lattice_cluster(25)])
def test_unit_l2(fam):
    assert lp_norm(fam, 2) == pytest.approx(1.0, abs=1e-10)


def test_zonal_l4_oracle():
    assert lp_norm(zonal(10), 4) == pytest.approx(ZONAL10_L4, rel=1e-10)


@pytest.mark.parametrize("ell", [3, 12, 50])
def test_zonal_sup_at_pole(ell):
    assert lp_norm(zonal(ell), np.inf) == pytest.approx(sqrt((2 * ell + 1) / (4 * pi)), rel=1e-9)


def _hw_lp(ell, p):
    # |c|^p 2 pi int_0^pi sin^{l p + 1}, with int sin^n = sqrt(pi) Gamma((n+1)/2) / Gamma(n/2 + 1)
    logc = 0.5 * (lgamma(2 * ell + 2) - log(4 * pi) - ell * log(4) - 2 * lgamma(ell + 1))
    n = ell * p + 1
    logI = 0.5 * log(pi) + lgamma((n + 1) / 2) - lgamma(n / 2 + 1)
    return exp((p * logc + log(2 * pi) + logI) / p)


@pytest.mark.parametrize("ell,p", [(4, 4.0), (20, 6.0), (33, 10.0)])
def test_highest_weight_closed_form(ell, p):
    assert lp_norm(highest_weight(ell), p) == pytest.approx(_hw_lp(ell, p), rel=1e-9)


def test_highest_weight_sup_on_equator():
    ell = 17
    c = sqrt(gamma(2 * ell + 2) / (4 * pi * 4**ell * gamma(ell + 1) ** 2))
    assert lp_norm(highest_weight(ell), np.inf) == pytest.approx(c, rel=1e-9)


def test_probability_normalization():
    f = torus_mode((1, 1))
    assert lp_norm(f, 5, probability=True) == pytest.approx(1.0, abs=1e-12)
    z = zonal(0)
    assert lp_norm(z, 3, probability=True) == pytest.approx((4 * pi) ** (-0.5), rel=1e-10)


def _r2(m):
    # 4 (d_1(m) - d_3(m)) counts representations as a sum of two squares
    d1 = sum(1 for d in range(1, m + 1) if m % d == 0 and d % 4 == 1)
    d3 = sum(1 for d in range(1, m + 1) if m % d == 0 and d % 4 == 3)
    return 4 * (d1 - d3)


@given(st.integers(1, 2000))
def test_lattice_points_count(m):
    assert lattice_points(m).shape[0] == _r2(m)


def test_cluster_sup_is_sqrt_count():
    fam = lattice_cluster(25)
    assert lp_norm(fam, np.inf) == pytest.approx(sqrt(12), rel=1e-9)
    with pytest.raises(DomainError):
        lattice_cluster(3)


@given(st.integers(1, 300).filter(lambda m: _r2(m) > 0), st.floats(0, 1), st.floats(0, 1))
def test_cluster_is_eigenfunction(m, x, y):
    fam = lattice_cluster(m)
    d = 1e-4
    lap = (fam(x + d, y) + fam(x - d, y) + fam(x, y + d) + fam(x, y - d) - 4 * fam(x, y)) / d**2
    assert abs(-lap - fam.lam**2 * fam(x, y)) <= 1e-4 * fam.lam**4 * sqrt(_r2(m))


def test_sup_slopes():
    ells = [8, 16, 32, 64, 128]
    assert exponent_fit("zonal", np.inf, ells).slope == pytest.approx(0.5, abs=0.01)
    assert exponent_fit("highest_weight", np.inf, ells).slope == pytest.approx(0.25, abs=0.01)


def test_fit_guards():
    with pytest.raises(DomainError):
        exponent_fit("zonal", 4, [10, 11, 12])
    with pytest.raises(DomainError):
        exponent_fit("zonal", 4, [10, 11, 12, 13, 14])


def test_resolution_check():
    from geobeams.spectral import _check_resolution

    _check_resolution(1.0, 1.0 + 1e-6, 4)
    with pytest.raises(DomainError):
        _check_resolution(1.0, 1.01, 4)


def test_cluster_growth_small_slope():
    g = cluster_linf_growth(2000)
    assert 0 <= g.slope <= 0.2
    assert np.all(g.ratios >= 2)
