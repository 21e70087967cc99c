from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geobeams.quantize import (
    K_OVERFLOW,
    M_UNDERFLOW,
    GridField,
    P_apply,
    SeparableSymbol,
    ShellMassKernel,
    TubeCutoffs,
    ball_centers,
    ball_filter,
    beam_decompose,
    cover_radius,
    dyadic_k,
    dyadic_m,
    grid_points,
    lattice_cluster_quasimode,
    mass_filter,
    op_apply,
    overlap_norm,
    plateau,
    quantize_cover,
    single_mode,
    split_good_bad,
)
from geobeams.tolerances import DomainError


def _random_field(N, h, seed=0):
    rng = np.random.default_rng(seed)
    return GridField(rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N)), h)


@pytest.fixture(scope="module")
def setup64():
    h = 1 / 64
    c = quantize_cover(h)
    return h, c, TubeCutoffs(c, h)


def test_identity_symbol():
    u = _random_field(32, 1 / 16)
    assert np.max(np.abs(op_apply(SeparableSymbol(), u).values - u.values)) < 1e-12


def test_multiplier_on_single_mode():
    h = 1 / 16
    u = single_mode((3, -2), h).to_grid(32)
    a = SeparableSymbol(xi_part=lambda a, b: np.cos(a) + b**2)
    xi = h * 2 * np.pi * np.array([3, -2])
    assert np.max(np.abs(op_apply(a, u).values - (np.cos(xi[0]) + xi[1] ** 2) * u.values)) < 1e-12


def test_multiplication_symbol():
    u = _random_field(32, 1 / 16, 1)
    f = lambda x, y: np.sin(2 * np.pi * x) * np.cos(4 * np.pi * y)  # noqa: E731
    out = op_apply(SeparableSymbol(x_part=f), u)
    assert np.max(np.abs(out.values - f(*grid_points(32)) * u.values)) < 1e-12


def test_separable_matches_direct_summation():
    u = _random_field(16, 1 / 8, 2)
    bx = lambda x, y: 1 + 0.5 * np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y)  # noqa: E731
    ax = lambda a, b: np.exp(-(a**2 + b**2))  # noqa: E731
    fast = op_apply(SeparableSymbol(bx, ax), u)
    dense = op_apply(lambda X, XI: bx(*X) * ax(*XI), u)
    assert np.max(np.abs(fast.values - dense.values)) < 1e-12


def test_P_on_modes():
    # 2 pi |(3, 4)| h = 1 for h = 1 / (10 pi)
    h = 1 / (10 * np.pi)
    u = single_mode((3, 4), h).to_grid(32)
    assert np.max(np.abs(P_apply(u).values)) < 1e-12
    h2 = 1 / (5 * np.pi)
    u2 = single_mode((3, 4), h2).to_grid(32)
    assert np.allclose(P_apply(u2).values, 3 * u2.values, atol=1e-12)


@pytest.mark.parametrize("lam", [64, 128])
def test_cluster_quasimode_quality(lam):
    u = lattice_cluster_quasimode(lam, 0)
    h = 1 / lam
    assert u.P().norm() / u.norm() <= 2 * h + h * h
    g = u.to_grid(4 * lam)
    assert P_apply(g).norm() / g.norm() == pytest.approx(u.P().norm() / u.norm(), rel=1e-9)


def test_grid_guards():
    with pytest.raises(DomainError):
        GridField(np.zeros((8, 8)), 1 / 64)
    with pytest.raises(DomainError):
        cover_radius(1 / 64, exponent=0.45)


def test_single_mode_beams_follow_direction(setup64):
    h, c, cut = setup64
    k = np.array([10, 1])  # 2 pi |k| h ~ 0.98
    u = single_mode(k, h).to_grid(256)
    beams = beam_decompose(u, c, h)
    xi = h * 2 * np.pi * k
    a = np.array([cut.xi_factor(j, "tilde")(xi[0], xi[1]) for j in range(c.n_tubes)])
    cell = np.nonzero(a > 0)[0]
    others = np.setdiff1d(np.arange(c.n_tubes), cell)
    assert cell.size > 0
    norms_cell = np.array([beams.beam(int(j)).norm() for j in cell])
    norms_other = np.array([beams.beam(int(j)).norm() for j in others[:: max(1, len(others) // 200)]])
    assert norms_other.max(initial=0.0) < 1e-12
    assert np.sum(norms_cell**2) >= 0.99 * (np.sum(norms_cell**2) + np.sum(norms_other**2))


def test_psi_zero_gives_zero_beams(setup64):
    h, c, cut = setup64
    u = lattice_cluster_quasimode(64, 0).to_grid(256)
    beams = beam_decompose(u, c, h, psi_zero=True)
    assert beams.sum().norm() == 0.0


def test_grouped_sum_equals_individual_beams(setup64):
    h, c, cut = setup64
    u = lattice_cluster_quasimode(64, 3).to_grid(256)
    beams = beam_decompose(u, c, h)
    idx = np.arange(0, c.n_tubes, 37)
    direct = sum((beams.beam(int(j)) for j in idx[1:]), beams.beam(int(idx[0])))
    assert (beams.sum(idx) - direct).norm() <= 1e-10


def _core_recovery_error(lam):
    h = 1 / lam
    N = 4 * lam
    c = quantize_cover(h, exponent=0.2)
    cut = TubeCutoffs(c, h)
    j = c.n_tubes // 3 + 5
    X, w, nu = cut.geometry
    from geobeams.quantize import _angle_to

    def bcore(x0, x1):
        d0 = x0 - X[j][0]
        d0 = d0 - np.round(d0)
        d1 = x1 - X[j][1]
        d1 = d1 - np.round(d1)
        q = d0 * nu[j][0] + d1 * nu[j][1]
        p = d0 * w[j][0] + d1 * w[j][1]
        return plateau(q, 0.2 * cut.r_perp, 0.45 * cut.r_perp) * plateau(p, 0.2 * cut.r_par, 0.45 * cut.r_par)

    def acore(a0, a1):
        return plateau(_angle_to(a0, a1, w[j]), 0.2 * cut.r_ang, 0.45 * cut.r_ang) * plateau(np.hypot(a0, a1) - 1, 0.05, 0.15)

    u = op_apply(SeparableSymbol(bcore, acore), _random_field(N, h, 1))
    bj = beam_decompose(u, c, h).beam(j)
    return (bj - u).norm() / u.norm()


@pytest.fixture(scope="module")
def core_errors():
    return {lam: _core_recovery_error(lam) for lam in (128, 256)}


def test_core_recovery_improves_with_lambda(core_errors):
    assert core_errors[256] < core_errors[128] < 1


@pytest.mark.xfail(strict=True, reason="core of a tube is narrower than the h-uncertainty scale at desk-scale lambda")
def test_core_recovery_within_five_percent(core_errors):
    assert core_errors[256] <= 0.05


def test_zero_field_buckets(setup64):
    h, c, cut = setup64
    prof = mass_filter(GridField.zeros(256, h), cut, 1.0)
    assert list(prof.buckets) == [K_OVERFLOW]
    assert len(prof.buckets[K_OVERFLOW]) == c.n_tubes


def test_dyadic_brackets():
    assert dyadic_k(np.array([1.0, 3.0]))[0] == -1 and dyadic_k(np.array([3.0]))[0] == -1
    assert dyadic_k(np.array([0.5]))[0] == 0
    assert dyadic_k(np.array([0.49]))[0] == 1
    assert dyadic_k(np.array([0.0]))[0] == K_OVERFLOW
    assert dyadic_m(np.array([1.0]))[0] == 0 and dyadic_m(np.array([1.01]))[0] == 1
    assert dyadic_m(np.array([0.0]))[0] == M_UNDERFLOW


@given(st.floats(1e-8, 0.999))
def test_dyadic_k_half_open(r):
    k = int(dyadic_k(np.array([r]))[0])
    assert 2.0 ** (-k - 1) <= r < 2.0**-k


@given(st.floats(1e-8, 1e8))
def test_dyadic_m_half_open(q):
    m = int(dyadic_m(np.array([q]))[0])
    assert 2.0 ** (m - 1) < q <= 2.0**m


@pytest.fixture(scope="module")
def cluster_profiles(setup64):
    h, c, cut = setup64
    ker = ShellMassKernel(cut, lattice_cluster_quasimode(64, 0).ks)
    return ker, {s: mass_filter(lattice_cluster_quasimode(64, s), cut, 1.0, ker) for s in range(5)}


def test_cluster_buckets_center(setup64, cluster_profiles):
    h, c, cut = setup64
    _, profs = cluster_profiles
    ks = np.concatenate([p.k_of[p.k_of < K_OVERFLOW] for p in profs.values()])
    assert abs(np.median(ks) - 0.5 * np.log2(c.n_tubes)) <= 2.5


def test_bucket_bound(setup64, cluster_profiles):
    h, c, cut = setup64
    for prof in cluster_profiles[1].values():
        for k, idx in prof.buckets.items():
            if k < K_OVERFLOW:
                assert len(idx) <= 4 * c.D * 4.0**k


@given(st.integers(0, 4))
def test_buckets_partition_tubes(setup64, cluster_profiles, s):
    h, c, cut = setup64
    prof = cluster_profiles[1][s]
    allidx = np.sort(np.concatenate(list(prof.buckets.values())))
    assert np.array_equal(allidx, np.arange(c.n_tubes))


def test_norm_PT_of_eigenfunction(setup64):
    h, c, cut = setup64
    # a lattice point on the circle of radius 1/(2 pi h) for h = 1/(10 pi)
    u = single_mode((3, 4), 1 / (10 * np.pi))
    assert abs(np.linalg.norm(u.P().coeffs)) < 1e-14
    from geobeams.quantize import _norm_PT

    assert _norm_PT(u, 5.0) == pytest.approx(u.norm(), abs=1e-12)


def test_ball_filter_rules(setup64):
    h, c, cut = setup64
    centers = ball_centers(c.R)
    zero = ball_filter(GridField.zeros(256, h), centers, c.R, h, 1.0, 0)
    assert list(zero) == [M_UNDERFLOW]
    u = lattice_cluster_quasimode(64, 0).to_grid(256)
    beams = beam_decompose(u, c, h)
    w = beams.sum(np.arange(0, c.n_tubes, 5))
    one = ball_filter(w, centers, c.R, h, 1.0, 0)
    two = ball_filter(w * 2.0, centers, c.R, h, 1.0, 0)
    m1 = {int(b): m for m, bs in one.items() for b in bs}
    m2 = {int(b): m for m, bs in two.items() for b in bs}
    assert all(m2[b] == m1[b] + 1 for b in m1 if m1[b] != M_UNDERFLOW)


def test_single_beam_ball_support(setup64):
    h, c, cut = setup64
    u = lattice_cluster_quasimode(64, 0).to_grid(256)
    beams = beam_decompose(u, c, h)
    X = cut.geometry[0]
    j = int(np.argmax([beams.beam(int(i)).norm() for i in range(0, c.n_tubes, 50)]) * 50)
    centers = ball_centers(c.R)
    cl = ball_filter(beams.beam(j), centers, c.R, h, 1.0, 0)
    finite = np.concatenate([b for m, b in cl.items() if m != M_UNDERFLOW])
    d = centers[finite] - X[j]
    d -= np.round(d)
    reach = c.R + np.hypot(cut.r_par, cut.r_perp) + 2 / 256
    assert finite.size > 0 and np.all(np.linalg.norm(d, axis=1) <= reach)


def test_split_good_bad(setup64):
    h, c, cut = setup64
    u = lattice_cluster_quasimode(64, 0).to_grid(256)
    beams = beam_decompose(u, c, h)
    idx = np.arange(0, c.n_tubes, 11)
    g, b = split_good_bad(beams, idx, [])
    assert b.norm() == 0 and (g - beams.sum(idx)).norm() < 1e-12
    g, b = split_good_bad(beams, idx, idx)
    assert g.norm() == 0
    bad = idx[::3]
    g, b = split_good_bad(beams, idx, bad)
    assert (b - beams.sum(bad)).norm() < 1e-12
    assert (g - beams.sum(np.setdiff1d(idx, bad))).norm() < 1e-12


def test_bounded_overlap_uniform_in_h():
    vals = []
    for lam in (64, 128):
        h = 1 / lam
        cut = TubeCutoffs(quantize_cover(h), h)
        vals.append(overlap_norm(cut).value)
    assert max(vals) <= 8
    assert max(vals) / min(vals) <= 1.3


@given(st.floats(-3, 3), st.floats(0.1, 1.0), st.floats(0.01, 1.0))
def test_plateau_range(d, inner, width):
    v = plateau(np.array([d]), inner, inner + width)[0]
    assert 0 <= v <= 1
    if abs(d) <= inner:
        assert v == 1
    if abs(d) >= inner + width:
        assert v == 0


@given(st.integers(0, 1000), st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False))
def test_op_apply_linear(seed, c):
    u = _random_field(16, 1 / 8, seed)
    v = _random_field(16, 1 / 8, seed + 1)
    a = SeparableSymbol(lambda x, y: np.cos(2 * np.pi * x), lambda a, b: 1 / (1 + a**2 + b**2))
    lhs = op_apply(a, u * c + v)
    rhs = op_apply(a, u) * c + op_apply(a, v)
    assert np.max(np.abs(lhs.values - rhs.values)) <= 1e-12 * (1 + abs(c)) * 10
