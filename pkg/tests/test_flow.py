from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geobeams.flow import (
    check_noconj_hypothesis,
    conjugate_points,
    ehrenfest_time,
    flow_points,
    geodesic_flow,
    max_expansion_rate,
    maximally_conjugate_set,
)
from geobeams.manifold import CotangentPoint, base_distance, flat_torus, product, random_cosphere, sphere, surface_of_revolution
from geobeams.tolerances import DEFAULT, DomainError

NORTH = np.array([0, 0, 1.0])
EAST = np.array([1.0, 0, 0])


def test_torus_straight_line():
    tr = geodesic_flow(flat_torus(2), CotangentPoint([0, 0], [1, 0]), 0.5)
    assert np.allclose(tr.x[-1], [0.5, 0], atol=1e-15)
    assert np.allclose(tr.xi[-1], [1, 0], atol=1e-15)


def test_sphere_period_two_pi():
    rng = np.random.default_rng(3)
    X, XI = random_cosphere(sphere(2), 5, rng)
    for x, xi in zip(X, XI):
        tr = geodesic_flow(sphere(2), CotangentPoint(x, xi), 2 * np.pi)
        assert np.allclose(tr.x[-1], x, atol=1e-8)
        assert np.allclose(tr.xi[-1], xi, atol=1e-8)


def test_revolution_against_finer_integration():
    M = surface_of_revolution([2.0, 1.0])
    rho = CotangentPoint(np.array([0.0, 0.0]), np.array([0.6, 0.8 * 3.0]))
    tr = geodesic_flow(M, rho, 1.0)
    fine = geodesic_flow(M, rho, 1.0, tol=DEFAULT.with_(ode_tol=1e-13))
    assert np.allclose(tr.x[-1], fine.x[-1], atol=1e-7)
    assert np.allclose(tr.xi[-1], fine.xi[-1], atol=1e-7)
    assert tr.energy_drift() < 1e-8
    assert np.allclose(tr.jacobi[0], np.eye(4), atol=1e-12)
    assert abs(np.linalg.det(tr.jacobi[-1]) - 1) < 1e-6


def test_rejects_non_unit_covector():
    with pytest.raises(DomainError):
        geodesic_flow(flat_torus(2), CotangentPoint([0, 0], [2, 0]), 1.0)


def test_torus_has_no_conjugate_points():
    assert conjugate_points(flat_torus(2), np.zeros(2), np.array([0.6, 0.8]), 10.0) == []


def test_sphere_first_conjugate_point():
    ev = conjugate_points(sphere(2), NORTH, EAST, 3.5)
    assert len(ev) == 1
    assert abs(ev[0].t - np.pi) < 1e-6
    assert ev[0].multiplicity == 1


@pytest.mark.parametrize("n", [2, 3, 4])
def test_sphere_conjugate_times_and_multiplicity(n):
    x = np.zeros(n + 1)
    x[-1] = 1
    xi = np.zeros(n + 1)
    xi[0] = 1
    ev = conjugate_points(sphere(n), x, xi, 3.5 * np.pi)
    assert [round(e.t / np.pi) for e in ev] == [1, 2, 3]
    assert all(abs(e.t - k * np.pi) < 1e-6 for k, e in enumerate(ev, start=1))
    assert all(e.multiplicity == n - 1 for e in ev)


@pytest.mark.parametrize("alpha", [0.3, 0.5, 1.0])
def test_product_conjugate_times_split(alpha):
    # only the sphere factor focuses; its clock runs at speed cos(alpha)
    P = product(sphere(2), flat_torus(1, (1.0,)))
    x = np.array([0, 0, 1.0, 0.3])
    xi = np.array([np.cos(alpha), 0, 0, np.sin(alpha)])
    ev = conjugate_points(P, x, xi, 10.0)
    expected = [k * np.pi / np.cos(alpha) for k in range(1, 10) if k * np.pi / np.cos(alpha) <= 10.0]
    assert len(ev) == len(expected)
    for e, t in zip(ev, expected):
        assert abs(e.t - t) < 1e-6
        assert e.multiplicity == 1


def test_maximally_conjugate_set_sphere_antipode():
    cs = maximally_conjugate_set(sphere(2), NORTH, 1, 0.1, np.pi)
    assert len(cs.points) > 0
    assert np.max(np.linalg.norm(cs.points + NORTH, axis=1)) < 1e-6


def test_maximally_conjugate_set_empty_cases():
    assert len(maximally_conjugate_set(flat_torus(2), np.zeros(2), 1, 0.2, 3.0).points) == 0
    P = product(sphere(2), flat_torus(1, (1.0,)))
    x = np.array([0, 0, 1.0, 0.0])
    for t in (np.pi, 5.0):
        assert len(maximally_conjugate_set(P, x, 2, 0.3, t).points) == 0
    with pytest.raises(DomainError):
        maximally_conjugate_set(sphere(2), NORTH, 2, 0.1, np.pi)


def test_hypothesis_torus_holds_with_infinite_margin():
    U, _ = random_cosphere(flat_torus(2), 3, np.random.default_rng(0))
    rep = check_noconj_hypothesis(flat_torus(2), U, 1.0, 1.0, 10.0, n_directions=16)
    assert rep.holds and rep.margin == np.inf


def test_hypothesis_sphere_fails_at_pi():
    U, _ = random_cosphere(sphere(2), 2, np.random.default_rng(1))
    U = np.vstack([U, -U])
    rep = check_noconj_hypothesis(sphere(2), U, 1.0, 1.0, 4.0, n_directions=64)
    assert not rep.holds and rep.margin < 0
    assert abs(rep.worst[2] - np.pi) < 0.2


def test_hypothesis_sphere_single_point_away_from_conjugate_times():
    # t in [1, 2.5]: windows t +- r_t never reach pi
    rep = check_noconj_hypothesis(sphere(2), NORTH[None, :], 1.0, 1.0, 2.5, n_directions=64)
    assert rep.holds


def test_expansion_rate_floor_and_ehrenfest():
    for M in (flat_torus(2), sphere(2)):
        est = max_expansion_rate(M, 8)
        assert est.value == DEFAULT.lambda_floor and est.floored
    assert ehrenfest_time(np.exp(-2), 1.0) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DomainError):
        ehrenfest_time(2.0, 1.0)


@given(st.integers(0, 1000), st.floats(0.0, 4.0), st.floats(0.0, 4.0))
def test_flow_group_property_sphere(seed, s, t):
    M = sphere(2)
    X, XI = random_cosphere(M, 1, np.random.default_rng(seed))
    a, b = flow_points(M, X[0], XI[0], np.array([t]))
    c, _ = flow_points(M, a[0], b[0], np.array([s]))
    d, _ = flow_points(M, X[0], XI[0], np.array([s + t]))
    assert base_distance(M, c[0], d[0]) < 1e-9


@given(st.integers(0, 1000), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_flow_group_property_revolution(seed, s, t):
    M = surface_of_revolution([2.0, 1.0])
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 2 * np.pi, 2)
    a = rng.uniform(0, 2 * np.pi)
    f = 2.0 + np.cos(x[0])
    xi = np.array([np.cos(a), f * np.sin(a)])
    p1, v1 = flow_points(M, x, xi, np.array([t]))
    p2, _ = flow_points(M, p1[0], v1[0], np.array([s]))
    p3, _ = flow_points(M, x, xi, np.array([s + t]))
    assert base_distance(M, p2[0], p3[0]) < 1e-7


@given(st.integers(0, 1000))
def test_energy_conservation_revolution(seed):
    M = surface_of_revolution([2.0, 0.5])
    rng = np.random.default_rng(seed)
    z, a = rng.uniform(0, 2 * np.pi, 2)
    f = 2.0 + 0.5 * np.cos(z)
    tr = geodesic_flow(M, CotangentPoint(np.array([z, 0.0]), np.array([np.cos(a), f * np.sin(a)])), 2.0)
    assert tr.energy_drift() < 1e-8
