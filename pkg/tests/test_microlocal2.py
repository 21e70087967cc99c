from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geobeams.microlocal2 import (
    Symbol2M,
    almost_orthogonality,
    build_coiso_cutoff,
    bump_symbol_pair,
    commutator_decay,
    composition_residual,
    dense_residual_norm,
    loglog_slope,
    min_grid,
    op2_adjoint,
    op2_apply,
    op2_apply_dense,
    orthogonality_bracket,
    rescale,
    separated_points,
    shell_modes,
    uncertainty_dense_norm,
    uncertainty_norm,
)
from geobeams.quantize import GridField, SeparableSymbol, op_apply
from geobeams.tolerances import DomainError


def _field(N, h, n=1, seed=0):
    rng = np.random.default_rng(seed)
    shape = (N,) * n
    return GridField(rng.standard_normal(shape) + 1j * rng.standard_normal(shape), h)


def _inner(a, b):
    return np.vdot(a.values.ravel(), b.values.ravel())


@pytest.fixture(scope="module")
def pair():
    return bump_symbol_pair(0.6)


def test_symbol_domain():
    with pytest.raises(DomainError):
        Symbol2M(lambda x, xi, lam: 1.0, rho=1.0)
    with pytest.raises(DomainError):
        Symbol2M(lambda x, xi, lam: 1.0, n=1, r=2)


def test_separable_route_matches_direct_summation(pair):
    a, _ = pair
    h = 1 / 16
    u = _field(64, h)
    fast = op2_apply(a, u)
    slow = op2_apply_dense(Symbol2M(a.evaluator, 1, 1, 0, a.rho, a.xi_box), u)
    assert np.max(np.abs(fast.values - slow.values)) < 1e-11


@pytest.mark.parametrize("dense", [False, True])
def test_adjoint_pairing(pair, dense):
    a, _ = pair
    if dense:
        a = Symbol2M(a.evaluator, 1, 1, 0, a.rho, a.xi_box)
    h = 1 / 16
    u, v = _field(64, h, seed=1), _field(64, h, seed=2)
    lhs = _inner(op2_apply(a, u), v)
    rhs = _inner(u, op2_adjoint(a, v))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_lambda_free_symbol_is_ordinary_quantization():
    h = 1 / 16
    g = lambda xi: 1 / (1 + xi[0] ** 2)  # noqa: E731
    f = lambda x, lam: np.cos(2 * np.pi * x[0])  # noqa: E731
    a = Symbol2M.separable([(f, g)], n=1, r=0, rho=0.5)
    u = _field(64, h, seed=3)
    ref = op_apply(SeparableSymbol(lambda x: np.cos(2 * np.pi * x), lambda xi: 1 / (1 + xi**2)), u)
    assert np.max(np.abs(op2_apply(a, u).values - ref.values)) < 1e-12


def test_grid_must_resolve_scale(pair):
    a, _ = pair
    h = 1 / 256
    assert min_grid(h, 0.6) == int(np.ceil(8 * 256**0.6))
    with pytest.raises(DomainError, match="h\\^rho"):
        op2_apply(a, _field(200, h))


def test_bump_pair_support_and_bounds(pair):
    for s in pair:
        assert s.check_support()
        ok, worst = s.check_estimates(C=20.0)
        assert ok and worst < 20


def test_product_symbol_pointwise(pair):
    a, b = pair
    rng = np.random.default_rng(0)
    x, xi, lam = [rng.random(50)], [rng.uniform(-2, 2, 50)], [rng.uniform(-9, 9, 50)]
    assert np.allclose((a * b)(x, xi, lam), a(x, xi, lam) * b(x, xi, lam))


def test_composition_residual_matches_dense(pair):
    a, b = pair
    h = 2.0**-4
    fast = composition_residual(a, b, [h], rtol=1e-10).values[0]
    dense = dense_residual_norm(a, b, h)
    assert fast == pytest.approx(dense, rel=1e-6)


@given(st.floats(0.1, 0.9), st.floats(-3, 3))
def test_loglog_slope_exact_power(p, c):
    x = np.array([1.0, 2.0, 4.0, 8.0])
    s, i = loglog_slope(x, np.exp(c) * x**p)
    assert s == pytest.approx(p, abs=1e-12) and i == pytest.approx(c, abs=1e-10)


def test_loglog_slope_nonpositive():
    assert np.isnan(loglog_slope([1, 2], [1, 0])[0])


@pytest.mark.parametrize("delta", [0.5, -0.5])
def test_rescale_is_isometry(delta):
    h = 1 / 16
    u = _field(64, h, n=2, seed=4)
    v = rescale(u, delta)
    assert v.factor == 4
    assert v.side == (4 if delta > 0 else 0.25)
    assert v.norm() == pytest.approx(u.norm(), rel=1e-14)
    back = rescale(v, -delta)
    assert np.allclose(back.values, u.values) and back.side == 1.0
    assert np.allclose(back.to_grid().values, u.values)


def test_rescale_rejects_poor_rounding():
    with pytest.raises(DomainError):
        rescale(_field(64, 1 / 16), 0.05, max_rounding=0.01)


def test_shell_modes_in_shell():
    h = 1 / 24
    k = shell_modes(80, h, 0.25)
    r = h * 2 * np.pi * np.linalg.norm(k, axis=1)
    assert np.all(np.abs(r - 1) < 0.25) and len(k) > 0


@pytest.fixture(scope="module")
def small_cutoff():
    return build_coiso_cutoff((0.3, 0.6), h=1 / 16)


@pytest.mark.parametrize("kind", ["X_y", "chi_hy"])
def test_cutoff_fast_route_matches_dense(kind):
    X = build_coiso_cutoff((0.3, 0.6), h=1 / 16, kind=kind)
    u = _field(X.N, 1 / 16, n=2, seed=5)
    assert np.max(np.abs(X.apply(u).values - X.apply_dense(u).values)) < 1e-12


@given(st.floats(0, 2 * np.pi), st.floats(-0.24, 0.24), st.floats(-0.2, 0.2))
def test_flow_out_symbol_invariant_along_lines(small_cutoff, ang, s, ds):
    # moving along the line through a point in direction xi keeps the symbol where the strip plateau is 1
    X = small_cutoff
    xi = [np.array([np.cos(ang)]), np.array([np.sin(ang)])]
    q = 0.5 * X.hr
    p0 = [X.y[0] + s * np.cos(ang) - q * np.sin(ang), X.y[1] + s * np.sin(ang) + q * np.cos(ang)]
    s2 = np.clip(s + ds, -0.25, 0.25)
    p1 = [X.y[0] + s2 * np.cos(ang) - q * np.sin(ang), X.y[1] + s2 * np.sin(ang) + q * np.cos(ang)]
    assert X.symbol([np.array([v]) for v in p0], xi) == pytest.approx(X.symbol([np.array([v]) for v in p1], xi))
    assert X.symbol([np.array([v]) for v in p0], xi)[0] == 1.0


def test_cutoff_guards():
    with pytest.raises(DomainError):
        build_coiso_cutoff((0, 0), eps=0.3, delta=0.25)
    with pytest.raises(DomainError):
        build_coiso_cutoff((0, 0), kind="ball")
    with pytest.raises(DomainError):
        build_coiso_cutoff((0, 0, 0))
    with pytest.raises(DomainError):
        build_coiso_cutoff((0, 0), h=1 / 64, N=32)


def test_commutator_with_P_decays():
    res = commutator_decay([32, 64, 128])
    assert np.all(np.diff(res.values) < 0)
    assert res.slope < -0.3


def test_uncertainty_fast_matches_svd():
    h = 1 / 24
    fast = uncertainty_norm([0.25], h, rtol=1e-10).norms[0]
    assert fast == pytest.approx(uncertainty_dense_norm(0.25, h), rel=1e-8)


def test_uncertainty_symmetric_in_t():
    h = 1 / 24
    res = uncertainty_norm([0.25, -0.25], h, rtol=1e-10)
    assert res.norms[0] == pytest.approx(res.norms[1], rel=1e-8)
    assert np.all(res.t_grid * 76 == np.round(res.t_grid * 76))


def test_uncertainty_window():
    h = 1 / 64
    with pytest.raises(DomainError, match="h\\^\\(rho - eps_q\\)"):
        uncertainty_norm([0.01], h)
    with pytest.raises(DomainError, match="eps0"):
        uncertainty_norm([0.45], h)


def test_bracket_values():
    assert orthogonality_bracket(1 / 64, 0.7, 0.25, 1) == pytest.approx(
        1 + (64**-0.4 / 0.25) ** 0.5 * (1 + (64**-0.4 / 0.25) ** 0.25)
    )


def test_separated_points():
    pts = separated_points(0.25, 8)
    d = pts[:, None] - pts[None]
    d -= np.round(d)
    dist = np.linalg.norm(d, axis=-1) + np.eye(8) * 9
    assert dist.min() >= 0.25 - 1e-12
    with pytest.raises(DomainError):
        separated_points(0.45, 100)


def test_orthogonality_single_point_and_guards():
    h = 1 / 48
    X = build_coiso_cutoff(np.zeros(2), h=h)
    pts = separated_points(0.3, 4, X.N)
    u = [_field(X.N, h, n=2, seed=s) for s in range(3)]
    one = almost_orthogonality(pts[:1], 0.7, h, u, 0.3)
    four = almost_orthogonality(pts, 0.7, h, u, 0.3)
    assert np.all(four.sums >= one.sums)
    assert np.all(one.sums <= 1.0 + 1e-12)  # ||X|| <= 1 on the shell
    with pytest.raises(DomainError, match="grid"):
        almost_orthogonality(pts + 0.1 / X.N, 0.7, h, u, 0.3)
    with pytest.raises(DomainError, match="separated"):
        almost_orthogonality(np.array([[0, 0], [1 / X.N, 0]]), 0.7, h, u, 0.3)
