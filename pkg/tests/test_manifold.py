from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geobeams.manifold import (
    CotangentPoint,
    base_distance,
    check_metric_positive,
    conorm,
    flat_torus,
    metric_at,
    phase_distance,
    product,
    random_cosphere,
    sphere,
    sphere_ambient_to_chart,
    sphere_chart_to_ambient,
    surface_of_revolution,
)
from geobeams.tolerances import DomainError

finite = st.floats(-3, 3, allow_nan=False)


def test_flat_metric_is_identity():
    assert np.array_equal(metric_at(flat_torus(2, (1, 1)), [0.3, 0.7]), np.eye(2))


def test_product_of_circles_metric():
    M = product(flat_torus(1, (1,)), flat_torus(1, (2,)))
    assert M.dim == 2
    assert np.array_equal(metric_at(M, [0.1, 0.2]), np.eye(2))


def _first_fundamental_form(theta, phi, eps=1e-6):
    # finite differences of the round embedding
    def X(t, p):
        return np.array([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)])

    dt = (X(theta + eps, phi) - X(theta - eps, phi)) / (2 * eps)
    dp = (X(theta, phi + eps) - X(theta, phi - eps)) / (2 * eps)
    return np.array([[dt @ dt, dt @ dp], [dp @ dt, dp @ dp]])


@pytest.mark.parametrize("theta,phi", [(0.4, 0.1), (1.2, 2.5), (2.8, -1.0)])
def test_sphere_metric_matches_embedding(theta, phi):
    g = metric_at(sphere(2), [theta, phi])
    assert np.allclose(g, np.diag([1, np.sin(theta) ** 2]), atol=1e-14)
    assert np.allclose(g, _first_fundamental_form(theta, phi), atol=1e-8)


def test_conorm_examples():
    assert conorm(flat_torus(2), [0, 0], [3, 4]) == pytest.approx(5.0, abs=1e-15)
    assert conorm(sphere(2), [np.pi / 2, 0], [1, 0]) == pytest.approx(1.0, abs=1e-14)
    assert conorm(sphere(2), [np.pi / 4, 0], [0, 1]) == pytest.approx(np.sqrt(2), abs=1e-14)


def test_injectivity_radius():
    assert sphere(3).injectivity_radius == np.pi
    assert flat_torus(2, (1.0, 3.0)).injectivity_radius == 0.5
    assert product(sphere(2), flat_torus(1, (1.0,))).injectivity_radius == 0.5


def test_product_dimension_and_volume():
    P = product(sphere(2), flat_torus(1, (2.0,)))
    assert P.dim == 3
    assert P.volume == pytest.approx(8 * np.pi)


def test_phase_distance_examples():
    T = flat_torus(2, (1, 1))
    p = CotangentPoint([0, 0], [1, 0])
    assert phase_distance(T, p, p) == 0
    q = CotangentPoint([0.01, 0], [1, 0])
    assert phase_distance(T, p, q) == pytest.approx(0.01, abs=1e-15)
    S = sphere(2)
    a = CotangentPoint([0, 0, 1.0], [1.0, 0, 0])
    b = CotangentPoint([0, 0, -1.0], [1.0, 0, 0])
    assert base_distance(S, a.x, b.x) == pytest.approx(np.pi, abs=1e-12)
    assert phase_distance(S, a, b) >= np.pi - 1e-12


def test_invalid_inputs():
    with pytest.raises(DomainError):
        flat_torus(2, (1.0, -1.0))
    with pytest.raises(DomainError):
        flat_torus(2, (1.0,))
    with pytest.raises(DomainError):
        metric_at(sphere(2), [0.1, 0.2, 0.3])
    with pytest.raises(DomainError):
        surface_of_revolution([0.5, 1.0])


def test_metric_positive_on_samples():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(0.05, np.pi - 0.05, 50), rng.uniform(0, 2 * np.pi, 50)])
    assert check_metric_positive(sphere(2), pts) > 0
    R = surface_of_revolution([2.0, 1.0])
    assert check_metric_positive(R, rng.uniform(0, 2 * np.pi, (50, 2))) > 0


@given(st.floats(0.1, 3.0), st.floats(-3, 3), finite, finite, st.floats(-5, 5))
def test_conorm_homogeneous(theta, phi, a, b, c):
    x = [theta, phi]
    xi = np.array([a, b])
    assert conorm(sphere(2), x, c * xi) == pytest.approx(abs(c) * conorm(sphere(2), x, xi), rel=1e-12, abs=1e-12)


@given(finite, finite, finite, st.floats(0.05, 3.0), finite, finite)
def test_product_conorm_splits(x1, xi1, xi2, theta, phi, eta):
    P = product(flat_torus(1, (1.0,)), sphere(2))
    S = sphere(2)
    v = np.array([xi2, eta])
    whole = conorm(P, [x1, theta, phi], np.concatenate([[xi1], v]))
    assert whole**2 == pytest.approx(xi1**2 + conorm(S, [theta, phi], v) ** 2, rel=1e-10, abs=1e-12)


@given(st.integers(0, 10_000))
def test_phase_distance_triangle_torus(seed):
    T = flat_torus(2, (1.0, 2.0))
    rng = np.random.default_rng(seed)
    X, XI = random_cosphere(T, 3, rng)
    p, q, r = (CotangentPoint(X[i], XI[i]) for i in range(3))
    assert phase_distance(T, p, r) <= phase_distance(T, p, q) + phase_distance(T, q, r) + 1e-9


@given(st.integers(0, 10_000))
def test_phase_distance_triangle_sphere_small(seed):
    # the transported-fiber term is a metric only for nearby points
    S = sphere(2)
    rng = np.random.default_rng(seed)
    x0, xi0 = random_cosphere(S, 1, rng)
    pts = []
    for _ in range(3):
        x = x0[0] + 0.05 * rng.normal(size=3)
        x /= np.linalg.norm(x)
        v = xi0[0] + 0.05 * rng.normal(size=3)
        v -= (v @ x) * x
        pts.append(CotangentPoint(x, v / np.linalg.norm(v)))
    p, q, r = pts
    assert phase_distance(S, p, r) <= phase_distance(S, p, q) + phase_distance(S, q, r) + 1e-9


@given(st.floats(0.05, 3.0), st.floats(-3, 3))
def test_sphere_chart_roundtrip(theta, phi):
    X = sphere_chart_to_ambient(np.array([theta, phi]))
    assert np.linalg.norm(X) == pytest.approx(1.0, abs=1e-14)
    back = sphere_ambient_to_chart(X)
    assert np.allclose(sphere_chart_to_ambient(back), X, atol=1e-12)


def test_random_cosphere_is_unit():
    for M in (sphere(2), flat_torus(2), product(sphere(2), flat_torus(1, (1.0,)))):
        X, XI = random_cosphere(M, 20, np.random.default_rng(0))
        assert np.allclose(conorm(M, X[0], XI[0]), 1.0, atol=1e-10)
