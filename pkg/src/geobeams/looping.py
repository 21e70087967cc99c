"""Looping and non-looping tubes between two base points.

A tube T_j over x1 is *bad* for (x1, x2) when its flow-out over times
[t0, T] meets the cosphere over B(x2, 2R); otherwise it is *good*.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cover import GoodCover, segment_distance, transversal_ball_samples, tubes_over_ball
from .manifold import ModelManifold
from .tolerances import DomainError

__all__ = [
    "LoopReport",
    "TubeHits",
    "tube_hits",
    "classify_tubes",
    "classify_tubes_reverse",
    "bad_count_sup",
    "bad_counts",
    "predicted_improvement",
    "critical_p",
    "lattice_segment_oracle",
]


@dataclass
class TubeHits:
    tubes: np.ndarray
    first_hit: np.ndarray  # inf for tubes that never hit
    min_distance: np.ndarray
    step: float
    radius: float


@dataclass
class LoopReport:
    x1: np.ndarray
    x2: np.ndarray
    t0: float
    T: float
    J: np.ndarray
    bad: np.ndarray
    good: np.ndarray
    first_hit: dict = field(default_factory=dict)
    min_distance: dict = field(default_factory=dict)
    step: float = 0.0

    def restrict(self, T: float) -> "LoopReport":
        """The report for a shorter horizon T' <= T, read off the same samples."""
        if T > self.T:
            raise DomainError("can only restrict to a shorter horizon")
        bad = np.array([j for j in self.bad if self.first_hit[j] <= T], dtype=int)
        good = np.setdiff1d(self.J, bad)
        fh = {j: (v if v <= T else np.inf) for j, v in self.first_hit.items()}
        return LoopReport(self.x1, self.x2, self.t0, T, self.J, bad, good, fh, self.min_distance, self.step)


def _positions(M: ModelManifold, x, xi, v):
    """Base points phi_v(x, xi) for x (K, d), v (K, m) or (m,)."""
    v = np.asarray(v, dtype=float)
    v = v[None, :, None] if v.ndim == 1 else v[..., None]
    if M.kind == "flat_torus":
        return x[:, None, :] + v * xi[:, None, :]
    return np.cos(v) * x[:, None, :] + np.sin(v) * xi[:, None, :]


def _dist_to(M: ModelManifold, P, y):
    if M.kind == "flat_torus":
        per = np.asarray(M.periods, dtype=float)
        d = P - y
        d = d - per * np.round(d / per)
        return np.linalg.norm(d, axis=-1)
    chord = np.linalg.norm(P - y, axis=-1)
    return 2 * np.arcsin(np.clip(chord / 2, 0, 1))


def _deviation_bound(M: ModelManifold, R: float, v):
    """Upper bound on the base distance between phi_v of a transversal-ball sample and of the center."""
    v = np.asarray(v, dtype=float)
    if M.kind == "flat_torus":
        return R * np.sqrt(1 + v**2)
    return np.full(v.shape, 2 * np.arcsin(min(1.0, np.sqrt(3) * R / 2)))


def _golden_argmin(f, a, b, iters=40):
    g = (np.sqrt(5) - 1) / 2
    c = b - g * (b - a)
    d = a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - g * (b - a)
        d_new = a + g * (b - a)
        c, d = np.where(left, c_new, d), np.where(left, c, d_new)
        f_new = f(np.where(left, c, d))
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
    return 0.5 * (a + b)


def _tube_samples(cover: GoodCover, tubes):
    """Transversal-ball samples of each tube: (x, xi, owner position)."""
    ds, dp = transversal_ball_samples(cover.R)
    X, XI, S, PSI, TID = cover.center_arrays
    xs, xis, owners = [], [], []
    tubes = np.asarray(tubes, dtype=int)
    for t in cover.transversals:
        sel = np.nonzero(TID[tubes] == t.id)[0]
        if sel.size == 0:
            continue
        s = S[tubes[sel]][:, None] + ds[None, :]
        psi = PSI[tubes[sel]][:, None] + dp[None, :]
        valid = np.abs(np.cos(psi)) >= 0.5 - 1e-12
        qx, qxi = t.embed(s[valid], psi[valid])
        xs.append(qx)
        xis.append(qxi)
        owners.append(np.broadcast_to(sel[:, None], s.shape)[valid])
    if not xs:
        d = cover.manifold.rep_dim
        return np.zeros((0, d)), np.zeros((0, d)), np.zeros(0, dtype=int)
    return np.concatenate(xs), np.concatenate(xis), np.concatenate(owners)


def tube_hits(cover: GoodCover, tubes, x2, t0: float, T: float, radius: float | None = None,
              step: float | None = None, point_chunk: int = 65536, time_chunk: int = 8) -> TubeHits:
    """First time t in [t0, T] at which phi_t(T_j) meets the cosphere over B(x2, radius).

    Flow times v = t + u with |u| <= tau + R are sampled with step <= R/4.
    Between samples the distance changes at most at unit rate, so any step
    interval whose sampled distances exceed radius + step/2 is skipped; the
    remaining intervals are checked with the closed-form arc distance and
    the first crossing of distance = radius is located by bisection.
    """
    M = cover.manifold
    R, tau = cover.R, cover.tau
    radius = 2 * R if radius is None else radius
    if step is None:
        step = R / 4
    if step > R / 4 * (1 + 1e-12):
        raise DomainError(f"time step {step:.4g} coarser than R/4 = {R / 4:.4g}")
    y = np.asarray(x2, dtype=float)
    tubes = np.asarray(tubes, dtype=int)
    half = tau + R
    v0, v1 = t0 - half, T + half
    nstep = max(1, int(np.ceil((v1 - v0) / step)))
    v = v0 + (v1 - v0) * np.arange(nstep + 1) / nstep
    dv = (v1 - v0) / nstep
    qx, qxi, owner = _tube_samples(cover, tubes)
    X, XI, *_ = cover.center_arrays
    cx, cxi = X[tubes], XI[tubes]
    # point lists per tube
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(len(tubes) + 1))
    first_v = np.full(len(tubes), np.inf)
    mind = np.full(len(tubes), np.inf)
    for c0 in range(0, nstep, time_chunk):
        c1 = min(nstep, c0 + time_chunk)
        vv = v[c0 : c1 + 1]
        live = np.nonzero(~np.isfinite(first_v))[0]
        if live.size == 0:
            break
        dc = _dist_to(M, _positions(M, cx[live], cxi[live], vv), y)
        slack = _deviation_bound(M, R, vv)
        near = np.min(dc - slack, axis=1) - dv / 2 < radius
        np.minimum.at(mind, live, np.maximum(0.0, np.min(dc - slack, axis=1)))
        tl = live[near]
        if tl.size == 0:
            continue
        alive = np.concatenate([order[bounds[t] : bounds[t + 1]] for t in tl])
        for p0 in range(0, alive.size, point_chunk):
            ids = alive[p0 : p0 + point_chunk]
            d = _dist_to(M, _positions(M, qx[ids], qxi[ids], vv), y)
            lo = np.minimum(d[:, :-1], d[:, 1:])
            cand = lo - dv / 2 < radius
            if not np.any(cand):
                continue
            pi, ii = np.nonzero(cand)
            a = vv[ii]
            b = vv[ii + 1]
            segd = segment_distance(M, y, qx[ids][pi], qxi[ids][pi], a, b)
            hit = segd < radius
            if not np.any(hit):
                continue
            pi, ii, a, b = pi[hit], ii[hit], a[hit], b[hit]
            # only the earliest hit interval of each tube can set its first hit
            own = owner[ids][pi]
            earliest = np.full(len(tubes), np.iinfo(int).max)
            np.minimum.at(earliest, own, ii)
            keep = ii == earliest[own]
            pi, a, b = pi[keep], a[keep], b[keep]
            px, pxi = qx[ids][pi], qxi[ids][pi]

            def f(t):
                return _dist_to(M, _positions(M, px, pxi, t[:, None])[:, 0], y)

            da = f(a)
            inside = da < radius
            m = np.where(inside, a, _golden_argmin(f, a, b))
            lo_t, hi_t = a.copy(), m.copy()
            for _ in range(50):
                mid = 0.5 * (lo_t + hi_t)
                below = f(mid) < radius
                hi_t = np.where(below, mid, hi_t)
                lo_t = np.where(below, lo_t, mid)
            vhit = np.where(inside, a, hi_t)
            # guard: golden minimum may fail to dip below radius on a grazing arc
            vhit = np.where(f(vhit) < radius * (1 + 1e-9), vhit, b)
            np.minimum.at(first_v, owner[ids][pi], vhit)
    hit_any = np.isfinite(first_v)
    mind[hit_any] = np.minimum(mind[hit_any], radius)
    first = np.where(np.isfinite(first_v), np.maximum(t0, first_v - half), np.inf)
    return TubeHits(tubes, first, mind, dv, radius)


def classify_tubes(cover: GoodCover, x1, x2, t0: float, T: float, R: float | None = None,
                   step: float | None = None, require_t0: bool = True) -> LoopReport:
    """Split J_{x1} into tubes that reach S*_{B(x2, 2R)} during [t0, T] and the rest."""
    if require_t0 and t0 < 1:
        raise DomainError(f"need t0 >= 1, got t0 = {t0}")
    if not T > t0:
        raise DomainError(f"need T > t0, got T = {T}, t0 = {t0}")
    R = cover.R if R is None else R
    J = tubes_over_ball(cover, x1, R)
    h = tube_hits(cover, J, x2, t0, T, radius=2 * R, step=step)
    badmask = h.first_hit <= T
    fh = {int(j): float(t) for j, t in zip(J, h.first_hit)}
    md = {int(j): float(d) for j, d in zip(J, h.min_distance)}
    return LoopReport(np.asarray(x1, float), np.asarray(x2, float), t0, T, J, J[badmask], J[~badmask], fh, md, h.step)


def _ball_cosphere_samples(M: ModelManifold, y, radius: float, spacing: float):
    """Grid samples of S*_{B(y, radius)}M with base and angle spacing ``spacing``."""
    m = int(np.ceil(radius / spacing))
    g = np.arange(-m, m + 1) * spacing
    A, B = np.meshgrid(g, g, indexing="ij")
    keep = A**2 + B**2 <= radius**2
    a, b = A[keep], B[keep]
    na = int(np.ceil(2 * np.pi / spacing))
    ang = 2 * np.pi * np.arange(na) / na
    y = np.asarray(y, dtype=float)
    if M.kind == "flat_torus":
        X = y + np.stack([a, b], axis=1)
        X = np.repeat(X, na, axis=0)
        th = np.tile(ang, len(a))
        XI = np.stack([np.cos(th), np.sin(th)], axis=1)
        return X, XI
    e1 = np.cross(y, [1.0, 0, 0] if abs(y[0]) < 0.9 else [0, 1.0, 0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(y, e1)
    r = np.hypot(a, b)
    w = (a[:, None] * e1 + b[:, None] * e2) / np.where(r > 0, r, 1)[:, None]
    X = np.cos(r)[:, None] * y + np.sin(r)[:, None] * w
    f1 = np.cross(X, e1)
    f1 = np.where(np.linalg.norm(f1, axis=1, keepdims=True) > 1e-8, f1, np.cross(X, e2))
    f1 /= np.linalg.norm(f1, axis=1, keepdims=True)
    f2 = np.cross(X, f1)
    X = np.repeat(X, na, axis=0)
    f1 = np.repeat(f1, na, axis=0)
    f2 = np.repeat(f2, na, axis=0)
    th = np.tile(ang, len(a))[:, None]
    return X, np.cos(th) * f1 + np.sin(th) * f2


def classify_tubes_reverse(cover: GoodCover, x1, x2, t0: float, T: float, R: float | None = None,
                           spacing: float | None = None, step: float | None = None) -> np.ndarray:
    """Bad tubes over x1 found by flowing S*_{B(x2, 2R)} backwards over [t0, T]."""
    M = cover.manifold
    R = cover.R if R is None else R
    spacing = R / 4 if spacing is None else spacing
    step = R / 4 if step is None else step
    J = tubes_over_ball(cover, x1, R)
    X, XI = _ball_cosphere_samples(M, x2, 2 * R, spacing)
    times = np.linspace(t0, T, int(np.ceil((T - t0) / step)) + 1)
    found = set()
    Jset = set(int(j) for j in J)
    for t in times:
        if M.kind == "flat_torus":
            P, V = X - t * XI, XI
        else:
            P = np.cos(t) * X - np.sin(t) * XI
            V = np.sin(t) * X + np.cos(t) * XI
        _, tb = cover.members(P, V)
        found.update(int(j) for j in np.unique(tb) if int(j) in Jset)
    return np.array(sorted(found), dtype=int)


def bad_counts(cover: GoodCover, U, t0: float, T: float, R: float | None = None) -> np.ndarray:
    """Matrix of |B_{x_a, x_b}| over ordered pairs of the sample U."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    out = np.zeros((len(U), len(U)), dtype=int)
    for a, x1 in enumerate(U):
        J = tubes_over_ball(cover, x1, cover.R if R is None else R)
        for b, x2 in enumerate(U):
            h = tube_hits(cover, J, x2, t0, T, radius=2 * (cover.R if R is None else R))
            out[a, b] = int(np.sum(h.first_hit <= T))
    return out


def bad_count_sup(cover: GoodCover, U, t0: float, T: float, R: float | None = None) -> int:
    """sup over sampled pairs of |B_{x1,x2}|; a lower bound for the sup over U."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if len(U) == 0:
        raise DomainError("U sample is empty")
    return int(bad_counts(cover, U, t0, T, R).max())


def critical_p(n: int) -> float:
    return 2 * (n + 1) / (n - 1)


def predicted_improvement(p: float, n: int, t0: float, T: float, badfrac: float, eps0: float = 0.0) -> float:
    """sqrt(t0/T) + badfrac^((1 - p_c/p)/(6 + eps0)); requires p > p_c."""
    pc = critical_p(n)
    if not p > pc:
        raise DomainError(f"need p > p_c = {pc:g}, got p = {p}")
    if badfrac < 0 or t0 <= 0 or T <= 0:
        raise DomainError("need badfrac >= 0, t0 > 0, T > 0")
    expo = (1 - pc / p) / (6 + eps0) if np.isfinite(p) else 1 / (6 + eps0)
    return float(np.sqrt(t0 / T) + badfrac**expo)


def lattice_segment_oracle(cover: GoodCover, J, x1, t0: float, T: float, R: float | None = None):
    """Counts from straight central lines on the torus, independent of the tube sampler.

    Returns (lower, upper): ``lower`` are tubes whose central geodesic passes
    within 2R of a lattice translate of x1 at a flow time in the window; ``upper``
    widens the test distance by the drift R(1 + |v|) of the transversal ball.
    """
    M = cover.manifold
    if M.kind != "flat_torus":
        raise DomainError("lattice oracle is for flat tori")
    R = cover.R if R is None else R
    per = np.asarray(M.periods, dtype=float)
    X, XI, *_ = cover.center_arrays
    half = cover.tau + cover.R
    vlo, vhi = t0 - half, T + half
    y = np.asarray(x1, dtype=float)
    kmax = np.ceil((vhi + 1) / per).astype(int)
    lower, upper = [], []
    for j in np.asarray(J, dtype=int):
        p, w = X[j], XI[j]
        best_lo, best_up = False, False
        for m0 in range(-kmax[0], kmax[0] + 1):
            for m1 in range(-kmax[1], kmax[1] + 1):
                z = y + np.array([m0, m1]) * per - p
                tproj = float(np.clip(z @ w, vlo, vhi))
                dist = float(np.linalg.norm(z - tproj * w))
                best_lo |= dist < 2 * R
                # upper: any time in window with dist < 2R + R(1 + |v|)
                ts = np.linspace(vlo, vhi, 2 + int((vhi - vlo) / (R / 8)))
                if not best_up and np.min(np.linalg.norm(z - ts[:, None] * w, axis=1) - R * (1 + np.abs(ts))) < 2 * R:
                    best_up = True
        if best_lo:
            lower.append(j)
        if best_up:
            upper.append(j)
    return np.array(lower, dtype=int), np.array(upper, dtype=int)
