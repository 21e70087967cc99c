from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geobeams.cover import (
    GoodCover,
    build_good_cover,
    check_cover_property,
    check_disjointness,
    check_uniform_coverage,
    greedy_partition,
    maximal_separated_set,
    segment_distance,
    tubes_over_ball,
    volume_ratio_bound,
)
from geobeams.manifold import flat_torus, random_cosphere, sphere
from geobeams.tolerances import DomainError

TORUS = flat_torus(2, (1.0, 1.0))


@pytest.fixture(scope="module")
def torus_cover():
    return build_good_cover(TORUS, 0.2, 0.1)


def _circle_gaps(pts, period):
    p = np.sort(np.mod(np.ravel(pts), period))
    return np.diff(np.concatenate([p, [p[0] + period]]))


def test_circle_separated_set():
    pts = maximal_separated_set(flat_torus(1, (1.0,)), 0.25)
    assert len(pts) == 4
    assert np.all(_circle_gaps(pts, 1.0) >= 0.25 - 1e-12)


def test_sphere_separated_set_count_in_cap_bracket():
    r = 0.5
    pts = maximal_separated_set(sphere(2), r)
    cap = lambda a: 2 * np.pi * (1 - np.cos(a))  # noqa: E731
    # r-balls cover the sphere; r/2-balls are disjoint
    assert 4 * np.pi / cap(r) <= len(pts) <= 4 * np.pi / cap(r / 2)
    G = pts @ pts.T
    np.fill_diagonal(G, -1)
    assert np.arccos(np.clip(G.max(), -1, 1)) >= r - 1e-9


def test_two_close_points_give_one():
    assert len(maximal_separated_set(None, 0.3, points=[[0.0, 0.0], [0.1, 0.0]])) == 1


def test_separated_set_radius_precondition():
    with pytest.raises(DomainError):
        maximal_separated_set(TORUS, 2.0)


def test_partition_examples():
    colors, classes = greedy_partition([[0, 0], [5, 0], [0, 5]], 1.0)
    assert len(classes) == 1
    colors, classes = greedy_partition([[0, 0], [0.5, 0]], 1.0)
    assert len(classes) == 2


def test_partition_count_on_separated_torus_set():
    rng = np.random.default_rng(4)
    period = 20.0
    r = 0.5
    pts = maximal_separated_set(None, r, points=rng.uniform(0, period, (4000, 2)))
    colors, classes = greedy_partition(pts, 6 * r, boxsize=period)
    # first fit uses at most (max conflicting neighbours + 1) classes; neighbours pack r/2-disks in B(6r + r/2)
    packing = (6 * r + r / 2) ** 2 / (r / 2) ** 2
    assert len(classes) <= packing <= volume_ratio_bound(2)


def test_torus_tube_count_against_area(torus_cover):
    c = torus_cover
    # centers form a maximal R/2-separated set of transversals of area 4 pi/3 per unit of arclength
    area = sum(t.s_period for t in c.transversals) * 4 * np.pi / 3
    lo, hi = area / (np.pi * (c.R / 2) ** 2), area / (np.pi * (c.R / 4) ** 2)
    assert lo / 4 <= c.n_tubes <= 4 * hi
    assert c.N_R == c.n_tubes


def test_torus_cover_invariants(torus_cover):
    assert check_cover_property(torus_cover, 5000).passed
    assert check_uniform_coverage(torus_cover, 5000).passed
    assert check_disjointness(torus_cover, max_tubes=100).passed


def test_radius_precondition():
    with pytest.raises(DomainError):
        build_good_cover(TORUS, 0.2, 1.5)
    with pytest.raises(DomainError):
        build_good_cover(TORUS, 0.5, 0.1)


def test_class_count_bounded_as_R_shrinks():
    Ds = [build_good_cover(TORUS, 0.2, R).D for R in (0.2, 0.1, 0.05, 0.025)]
    assert max(Ds) <= volume_ratio_bound(3)
    # once the return-time fallback is off the count stops changing
    assert Ds[1] == Ds[2] == Ds[3]


def test_tube_contains_its_central_geodesic(torus_cover):
    c = torus_cover
    X, XI, *_ = c.center_arrays
    for j in (0, 17, 5000):
        x = np.mod(X[j] + 0.1 * XI[j], 1.0)
        assert j in tubes_over_ball(c, x, c.R)


def test_tubes_over_ball_counts_scale_like_inverse_R():
    x = np.array([0.37, 0.61])
    C = [len(tubes_over_ball(build_good_cover(TORUS, 0.2, R), x)) * R for R in (0.2, 0.1)]
    assert 0.5 <= C[1] / C[0] <= 2


def test_segment_distance_far_point():
    d = segment_distance(flat_torus(2, (10.0, 10.0)), np.array([5.0, 5.0]), np.array([0.0, 0.0]),
                         np.array([1.0, 0.0]), -0.3, 0.3)
    assert d == pytest.approx(np.hypot(4.7, 5.0))


def test_json_roundtrip(torus_cover):
    c2 = GoodCover.from_json(torus_cover.to_json())
    assert c2.n_tubes == torus_cover.n_tubes and c2.D == torus_cover.D
    assert np.array_equal(c2.labels, torus_cover.labels)


def test_sphere_cover_small_sample():
    c = build_good_cover(sphere(2), 0.2, 0.2)
    assert check_cover_property(c, 2000).passed


@given(st.integers(0, 10_000), st.floats(0.05, 0.5))
def test_partition_has_no_conflicts(seed, radius):
    pts = np.random.default_rng(seed).uniform(0, 1, (60, 2))
    colors, classes = greedy_partition(pts, radius)
    for cl in classes:
        P = pts[cl]
        d = np.linalg.norm(P[:, None] - P[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > radius
    assert sorted(np.concatenate(classes).tolist()) == list(range(len(pts)))


@given(st.integers(0, 10_000), st.floats(0.05, 0.3))
def test_separated_set_is_maximal(seed, r):
    pts = np.random.default_rng(seed).uniform(0, 1, (200, 2))
    chosen = maximal_separated_set(None, r, points=pts)
    d = np.linalg.norm(chosen[:, None] - chosen[None, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= r * (1 - 1e-12)
    # every input point is within r of a chosen one
    assert np.linalg.norm(pts[:, None] - chosen[None, :], axis=-1).min(axis=1).max() < r


@given(st.integers(0, 1000))
def test_random_points_are_covered(seed):
    c = build_good_cover(TORUS, 0.2, 0.2)
    X, XI = random_cosphere(TORUS, 50, np.random.default_rng(seed))
    assert np.all(c.membership(X, XI))
