from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geobeams.cover import build_good_cover
from geobeams.looping import (
    bad_count_sup,
    bad_counts,
    classify_tubes,
    classify_tubes_reverse,
    critical_p,
    lattice_segment_oracle,
    predicted_improvement,
)
from geobeams.manifold import flat_torus, sphere
from geobeams.tolerances import DomainError

ORIGIN = np.zeros(2)


@pytest.fixture(scope="module")
def cover():
    return build_good_cover(flat_torus(2, (1.0, 1.0)), 0.2, 0.1)


@pytest.fixture(scope="module")
def report(cover):
    return classify_tubes(cover, ORIGIN, ORIGIN, 1.0, 3.0)


def test_partition_of_J(report):
    assert len(np.intersect1d(report.bad, report.good)) == 0
    assert np.array_equal(np.sort(np.concatenate([report.bad, report.good])), np.sort(report.J))


def test_closed_geodesic_tube_is_bad(cover, report):
    X, XI, *_ = cover.center_arrays
    d = X[report.J] - np.round(X[report.J])
    # tube through the origin along the horizontal closed geodesic of length 1
    score = np.abs(XI[report.J, 1]) + np.abs(d[:, 1])
    j = int(report.J[np.argmin(score)])
    assert j in set(report.bad.tolist())
    assert 1.0 <= report.first_hit[j] <= 1.0 + 1e-9 + cover.tau


def test_matches_lattice_oracle(cover, report):
    lo, up = lattice_segment_oracle(cover, report.J, ORIGIN, 1.0, 3.0)
    assert set(lo.tolist()) <= set(report.bad.tolist()) <= set(up.tolist())
    # fraction of looping tubes agrees with the oracle within a factor 2
    assert len(lo) / 2 <= len(report.bad) <= 2 * len(up)


def test_irrational_tubes_short_horizon_are_good(cover):
    rep = classify_tubes(cover, ORIGIN, ORIGIN, 1.0, 1.5)
    _, up = lattice_segment_oracle(cover, rep.J, ORIGIN, 1.0, 1.5)
    outside = np.setdiff1d(rep.J, up)
    assert outside.size > 0
    assert set(outside.tolist()) <= set(rep.good.tolist())


def test_reverse_classification_agrees(cover):
    fwd = classify_tubes(cover, ORIGIN, ORIGIN, 1.0, 2.0)
    rev = classify_tubes_reverse(cover, ORIGIN, ORIGIN, 1.0, 2.0)
    diff = np.setxor1d(fwd.bad, rev)
    assert len(diff) <= 0.1 * max(len(fwd.bad), 1)


def test_sphere_antipode_all_bad():
    s = build_good_cover(sphere(2), 0.2, 0.2)
    x = np.array([0, 0, 1.0])
    rep = classify_tubes(s, x, -x, 1.0, 4.0)
    assert len(rep.J) > 0 and len(rep.good) == 0
    assert bad_count_sup(s, x[None, :], 1.0, 4.0) <= len(rep.J)


def test_bad_counts_shape(cover):
    U = np.array([[0.0, 0.0], [0.5, 0.5]])
    B = bad_counts(cover, U, 1.0, 1.5)
    assert B.shape == (2, 2) and np.all(B >= 0)
    with pytest.raises(DomainError):
        bad_count_sup(cover, np.zeros((0, 2)), 1.0, 2.0)


def test_predicted_improvement_arithmetic():
    assert predicted_improvement(12, 2, 1.0, 100.0, 0.0) == pytest.approx(0.1, abs=1e-15)
    assert predicted_improvement(12, 2, 1.0, 100.0, 1e-6) == pytest.approx(0.1 + (1e-6) ** (1 / 12), rel=1e-14)
    assert critical_p(2) == 6.0
    with pytest.raises(DomainError):
        predicted_improvement(6, 2, 1.0, 100.0, 0.1)


def test_preconditions(cover):
    with pytest.raises(DomainError):
        classify_tubes(cover, ORIGIN, ORIGIN, 0.5, 2.0)
    with pytest.raises(DomainError):
        classify_tubes(cover, ORIGIN, ORIGIN, 2.0, 2.0)


@given(st.floats(1.01, 3.0), st.floats(1.01, 3.0))
def test_bad_set_monotone_in_T(report, T1, T2):
    T1, T2 = sorted((T1, T2))
    b1, b2 = report.restrict(T1).bad, report.restrict(T2).bad
    assert set(b1.tolist()) <= set(b2.tolist())


def test_restrict_matches_recomputation(cover, report):
    direct = classify_tubes(cover, ORIGIN, ORIGIN, 1.0, 2.0)
    assert np.array_equal(np.sort(direct.bad), np.sort(report.restrict(2.0).bad))
