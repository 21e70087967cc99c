"""Tube covers of the unit cosphere bundle of two-dimensional model surfaces.

Transversals are hypersurfaces of phase space over a curve H in M:

* flat 2-torus: the coordinate lines x_a = c,
* round 2-sphere: great circles through a coordinate axis.

Every transversal carries coordinates (s, psi) where s is arclength along
H and xi = cos(psi) N + sin(psi) T in the frame of unit normal N and unit
tangent T. Only points with |cos psi| >= 1/2 belong to the transversal.
In these coordinates the phase distance between two transversal points is
sqrt(d_circ(s)^2 + |xi - xi'|^2), which is what the KD-trees below use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .manifold import CotangentPoint, ModelManifold, flat_torus, sphere
from .tolerances import DomainError

__all__ = [
    "Transversal",
    "Tube",
    "GoodCover",
    "CoverCheck",
    "transversal_family",
    "maximal_separated_set",
    "greedy_partition",
    "build_good_cover",
    "tubes_over_ball",
    "check_cover_property",
    "check_uniform_coverage",
    "check_disjointness",
    "volume_ratio_bound",
    "transversal_ball_samples",
    "segment_distance",
]

_ARC = np.pi / 3  # |cos psi| >= 1/2
_XI_SHIFT = 3.0
_XI_BOX = 8.0
R0_DEFAULT = 1.0


# --- transversals ------------------------------------------------------------------


@dataclass(frozen=True)
class Transversal:
    id: int
    kind: str  # "line" (torus) or "great_circle" (sphere)
    s_period: float
    origin: tuple
    tangent: tuple
    normal: tuple
    group: int
    periods: tuple | None = None

    @property
    def _o(self):
        return np.asarray(self.origin)

    @property
    def _t(self):
        return np.asarray(self.tangent)

    @property
    def _n(self):
        return np.asarray(self.normal)

    def frame(self, s):
        """Base points, unit tangents and unit normals at parameters s."""
        s = np.asarray(s, dtype=float)[..., None]
        if self.kind == "line":
            x = np.mod(self._o + s * self._t, np.asarray(self.periods))
            T = np.broadcast_to(self._t, x.shape)
        else:
            x = np.cos(s) * self._o + np.sin(s) * self._t
            T = -np.sin(s) * self._o + np.cos(s) * self._t
        N = np.broadcast_to(self._n, x.shape)
        return x, T, N

    def embed(self, s, psi):
        x, T, N = self.frame(s)
        psi = np.asarray(psi, dtype=float)[..., None]
        return x, np.cos(psi) * N + np.sin(psi) * T

    def crossings(self, x, xi, umax: float):
        """Times |u| <= umax at which the unit-speed geodesic through (x, xi) meets H.

        Returns arrays (point_index, u, s, psi, xi_normal).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if self.kind == "line":
            return self._line_crossings(x, xi, umax)
        return self._circle_crossings(x, xi, umax)

    def _line_crossings(self, x, xi, umax):
        a = int(np.argmax(np.abs(self._n)))
        b = 1 - a
        L = float(self.periods[a])
        c = float(self._o[a])
        va = xi[:, a]
        ok = np.abs(va) > 1e-12
        span = umax * np.abs(va)
        lo = np.ceil((x[:, a] - c - span) / L)
        hi = np.floor((x[:, a] - c + span) / L)
        idx, us = [], []
        if np.any(ok):
            for m in np.arange(lo[ok].min(), hi[ok].max() + 1):
                sel = ok & (m >= lo) & (m <= hi)
                if not np.any(sel):
                    continue
                u = (c - x[sel, a] + m * L) / va[sel]
                idx.append(np.nonzero(sel)[0])
                us.append(u)
        if not idx:
            e = np.zeros(0)
            return np.zeros(0, dtype=int), e, e, e, e
        idx = np.concatenate(idx)
        u = np.concatenate(us)
        keep = np.abs(u) <= umax
        idx, u = idx[keep], u[keep]
        # s measured from the origin along the tangent
        s = np.mod(x[idx, b] + u * xi[idx, b] - self._o[b], float(self.periods[b]))
        sign_t = float(self._t[b])
        if sign_t < 0:
            s = np.mod(-s, float(self.periods[b]))
        xn = xi[idx] @ self._n
        xt = xi[idx] @ self._t
        return idx, u, s, np.arctan2(xt, xn), xn

    def _circle_crossings(self, x, xi, umax):
        n = self._n
        A = x @ n
        B = xi @ n
        rho = np.hypot(A, B)
        ok = rho > 1e-14
        phi = np.arctan2(B, A)
        base = phi + np.pi / 2
        kmin = np.floor((-umax - base.max()) / np.pi) - 1
        kmax = np.ceil((umax - base.min()) / np.pi) + 1
        idx, us = [], []
        for k in np.arange(kmin, kmax + 1):
            u = base + k * np.pi
            sel = ok & (np.abs(u) <= umax)
            if np.any(sel):
                idx.append(np.nonzero(sel)[0])
                us.append(u[sel])
        if not idx:
            e = np.zeros(0)
            return np.zeros(0, dtype=int), e, e, e, e
        idx = np.concatenate(idx)
        u = np.concatenate(us)
        cu, su = np.cos(u)[:, None], np.sin(u)[:, None]
        p = x[idx] * cu + xi[idx] * su
        w = -x[idx] * su + xi[idx] * cu
        s = np.mod(np.arctan2(p @ self._t, p @ self._o), 2 * np.pi)
        _, T, _ = self.frame(s)
        xn = w @ n
        xt = np.sum(w * T, axis=-1)
        return idx, u, s, np.arctan2(xt, xn), xn

    def to_json(self):
        return {
            "id": self.id,
            "kind": self.kind,
            "s_period": self.s_period,
            "origin": list(self.origin),
            "tangent": list(self.tangent),
            "normal": list(self.normal),
            "group": self.group,
            "periods": None if self.periods is None else list(self.periods),
        }


def _tupled(v):
    return tuple(float(a) for a in v)


def transversal_family(M: ModelManifold, tau: float):
    """Finitely many transversals whose flow-outs over |t| <= tau cover S*M.

    Torus: lines x_a = k L_a / K_a with K_a = ceil(sqrt(2) L_a / (2 tau)); the
    coordinate with |xi_a| >= 1/sqrt(2) then crosses a line within time tau.
    Sphere: K = ceil(sqrt(3) pi / (2 tau)) meridian circles per axis; the axis
    with |w_i| >= 1/sqrt(3), w = x wedge xi, gives |xi_N| >= 1/sqrt(3) at each
    crossing and longitude speed >= 1/sqrt(3).
    """
    out = []
    if M.kind == "flat_torus" and M.dim == 2:
        P = tuple(float(p) for p in M.periods)
        for a in (0, 1):
            b = 1 - a
            K = int(np.ceil(np.sqrt(2) * P[a] / (2 * tau)))
            for k in range(K):
                o = np.zeros(2)
                o[a] = k * P[a] / K
                e_a, e_b = np.eye(2)[a], np.eye(2)[b]
                out.append(Transversal(len(out), "line", P[b], _tupled(o), _tupled(e_b), _tupled(e_a), a, P))
        return out
    if M.kind == "sphere" and M.dim == 2:
        K = int(np.ceil(np.sqrt(3) * np.pi / (2 * tau)))
        E = np.eye(3)
        for i in range(3):
            j, l = (i + 1) % 3, (i + 2) % 3
            for k in range(K):
                ph = k * np.pi / K
                n = np.cos(ph) * E[j] + np.sin(ph) * E[l]
                u2 = np.cross(n, E[i])
                out.append(Transversal(len(out), "great_circle", 2 * np.pi, _tupled(E[i]), _tupled(u2), _tupled(n), 0))
        return out
    raise DomainError("tube covers are implemented for flat_torus(2) and sphere(2)")


def _return_time(M: ModelManifold) -> float:
    """Lower bound for the time between crossings of the same transversal."""
    if M.kind == "flat_torus":
        return float(min(M.periods))
    return float(np.pi)


def _tau_max(M: ModelManifold) -> float:
    return _return_time(M) / 3


# --- separated sets and partitions ---------------------------------------------------------


def _greedy_separated(coords: np.ndarray, r: float, boxsize=None) -> np.ndarray:
    """Indices of a greedy maximal r-separated subset, scanning in order.

    A candidate is accepted unless a previously accepted point lies at
    distance < r.
    """
    tree = cKDTree(coords, boxsize=boxsize)
    blocked = np.zeros(len(coords), dtype=bool)
    chosen = []
    rr = r * (1 - 1e-12)
    for i in range(len(coords)):
        if blocked[i]:
            continue
        chosen.append(i)
        nb = tree.query_ball_point(coords[i], rr, return_sorted=False)
        blocked[nb] = True
    return np.array(chosen, dtype=int)


def _transversal_coords(s, psi, period):
    c = np.stack([np.mod(s, period), np.cos(psi) + _XI_SHIFT, np.sin(psi) + _XI_SHIFT], axis=-1)
    return c, np.array([period, _XI_BOX, _XI_BOX])


def _transversal_reference(period: float, spacing: float):
    ns = int(np.ceil(period / spacing))
    s = np.arange(ns) * (period / ns)
    npsi = int(np.ceil(2 * _ARC / spacing)) + 1
    arc = np.linspace(-_ARC, _ARC, npsi)
    psi = np.concatenate([arc, arc + np.pi])
    P, S = np.meshgrid(psi, s, indexing="ij")
    return S.ravel(), P.ravel()


def maximal_separated_set(space, r: float, spacing: float | None = None, points=None, R0: float = R0_DEFAULT):
    """Greedy maximal r-separated subset of a reference sample of ``space``.

    ``space`` is flat_torus(1 or 2), sphere(2), a Transversal, or None with
    explicit ``points`` (Euclidean). The reference sample has spacing
    ``spacing`` (default r/4). Every reference point is within r of a chosen
    point and chosen points are pairwise >= r apart.
    """
    if not 0 < r < R0 and points is None:
        raise DomainError(f"need 0 < r < R0 = {R0}, got r = {r}")
    if points is not None:
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return pts[_greedy_separated(pts, r)]
    spacing = r / 4 if spacing is None else spacing
    if spacing > r / 4 * (1 + 1e-12):
        raise DomainError(f"reference spacing {spacing:.4g} coarser than r/4 = {r / 4:.4g}")
    if isinstance(space, Transversal):
        s, psi = _transversal_reference(space.s_period, spacing)
        coords, box = _transversal_coords(s, psi, space.s_period)
        idx = _greedy_separated(coords, r, box)
        return np.stack([s[idx], psi[idx]], axis=1)
    if isinstance(space, ModelManifold) and space.kind == "flat_torus":
        P = np.asarray(space.periods, dtype=float)
        axes = [np.arange(int(np.ceil(p / spacing))) * (p / int(np.ceil(p / spacing))) for p in P]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(P))
        idx = _greedy_separated(grid, r, P)
        return grid[idx]
    if isinstance(space, ModelManifold) and space.kind == "sphere" and space.dim == 2:
        count = int(np.ceil(4 * np.pi / spacing**2))
        k = np.arange(count) + 0.5
        z = 1 - 2 * k / count
        ph = np.pi * (1 + 5**0.5) * k
        rad = np.sqrt(1 - z * z)
        pts = np.stack([rad * np.cos(ph), rad * np.sin(ph), z], axis=1)
        chord = 2 * np.sin(r / 2)
        return pts[_greedy_separated(pts, chord)]
    raise DomainError("unsupported space for maximal_separated_set")


def greedy_partition(points, conflict_radius: float, boxsize=None, chunk: int = 4096):
    """First-fit coloring: i conflicts with j when their distance is <= conflict_radius.

    Points are processed in ascending index order and receive the lowest
    class not used by an earlier conflicting point. Returns (colors, classes).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    colors = np.full(n, -1, dtype=int)
    if n == 0:
        return colors, []
    if not np.isfinite(conflict_radius):
        colors = np.arange(n)
        return colors, [np.array([i]) for i in range(n)]
    tree = cKDTree(pts, boxsize=boxsize)
    rr = conflict_radius * (1 + 1e-12)
    for start in range(0, n, chunk):
        nbs = tree.query_ball_point(pts[start : start + chunk], rr, return_sorted=False)
        for off, nb in enumerate(nbs):
            i = start + off
            nb = np.asarray(nb, dtype=int)
            used = colors[nb[nb < i]]
            if used.size == 0:
                colors[i] = 0
                continue
            mark = np.zeros(used.max() + 2, dtype=bool)
            mark[used] = True
            colors[i] = int(np.argmin(mark))
    D = int(colors.max()) + 1
    order = np.argsort(colors, kind="stable")
    bounds = np.searchsorted(colors[order], np.arange(D + 1))
    classes = [order[bounds[c] : bounds[c + 1]] for c in range(D)]
    return colors, classes


def volume_ratio_bound(dim: int) -> float:
    """vol B(14 r) / vol B(r / 2) in flat dimension ``dim``."""
    return 28.0**dim


# --- tubes and covers ---------------------------------------------------------------


def transversal_ball_samples(R: float, spacing: float | None = None):
    """Offsets (ds, dpsi) of a grid inside the transversal ball of radius R."""
    spacing = R / 8 if spacing is None else spacing
    m = int(np.ceil(R / spacing))
    ds = np.arange(-m, m + 1) * spacing
    dmax = 2 * np.arcsin(min(1.0, R / 2))
    mp = int(np.ceil(dmax / spacing))
    dp = np.arange(-mp, mp + 1) * (dmax / max(mp, 1))
    S, P = np.meshgrid(ds, dp, indexing="ij")
    keep = S**2 + (2 * np.sin(P / 2)) ** 2 <= R**2 * (1 + 1e-12)
    return S[keep], P[keep]


@dataclass
class Tube:
    center: CotangentPoint
    tau: float
    radius: float
    transversal_id: int
    s: float
    psi: float
    index: int
    klass: int
    transversal: Transversal = field(repr=False, default=None)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def sample_cache(self):
        """Transversal ball samples (x, xi) with |xi_N| >= 1/2, spacing R/8."""
        if "q" not in self._cache:
            ds, dp = transversal_ball_samples(self.radius)
            psi = self.psi + dp
            keep = np.abs(np.cos(psi)) >= 0.5 - 1e-12
            self._cache["q"] = self.transversal.embed(self.s + ds[keep], psi[keep])
        return self._cache["q"]

    @property
    def half_length(self) -> float:
        return self.tau + self.radius


@dataclass
class GoodCover:
    manifold: ModelManifold
    tau: float
    R: float
    transversals: list
    centers: dict  # group -> (m, 2) array of (s, psi)
    colors: dict  # group -> (m,) int array
    sep: float

    @cached_property
    def _group_size(self):
        return {g: len(c) for g, c in self.centers.items()}

    @cached_property
    def offsets(self) -> np.ndarray:
        sizes = [self._group_size[t.group] for t in self.transversals]
        return np.concatenate([[0], np.cumsum(sizes)])

    @property
    def n_tubes(self) -> int:
        return int(self.offsets[-1])

    @property
    def N_R(self) -> int:
        return self.n_tubes

    @cached_property
    def class_offsets(self) -> np.ndarray:
        nc = [int(self.colors[t.group].max()) + 1 for t in self.transversals]
        return np.concatenate([[0], np.cumsum(nc)])

    @property
    def D(self) -> int:
        return int(self.class_offsets[-1])

    @property
    def D_per_transversal(self) -> dict:
        return {g: int(c.max()) + 1 for g, c in self.colors.items()}

    def locate(self, j):
        """(transversal id, center index) of global tube index j."""
        j = np.asarray(j)
        t = np.searchsorted(self.offsets, j, side="right") - 1
        return t, j - self.offsets[t]

    @cached_property
    def labels(self) -> np.ndarray:
        out = np.empty(self.n_tubes, dtype=int)
        for t in self.transversals:
            a, b = self.offsets[t.id], self.offsets[t.id + 1]
            out[a:b] = self.class_offsets[t.id] + self.colors[t.group]
        return out

    @property
    def partition(self) -> list:
        lab = self.labels
        order = np.argsort(lab, kind="stable")
        bounds = np.searchsorted(lab[order], np.arange(self.D + 1))
        return [order[bounds[c] : bounds[c + 1]] for c in range(self.D)]

    @cached_property
    def center_arrays(self):
        """(x, xi, s, psi, transversal id) for every tube, in global order."""
        xs, xis, ss, ps, ts = [], [], [], [], []
        for t in self.transversals:
            c = self.centers[t.group]
            x, xi = t.embed(c[:, 0], c[:, 1])
            xs.append(x)
            xis.append(xi)
            ss.append(c[:, 0])
            ps.append(c[:, 1])
            ts.append(np.full(len(c), t.id))
        return (np.concatenate(xs), np.concatenate(xis), np.concatenate(ss), np.concatenate(ps), np.concatenate(ts))

    def tube(self, j: int) -> Tube:
        t, c = self.locate(int(j))
        tr = self.transversals[int(t)]
        s, psi = self.centers[tr.group][int(c)]
        x, xi = tr.embed(s, psi)
        return Tube(CotangentPoint(x, xi), self.tau, self.R, int(t), float(s), float(psi), int(j),
                    int(self.labels[int(j)]), tr)

    @property
    def tubes(self) -> list:
        return [self.tube(j) for j in range(self.n_tubes)]

    @cached_property
    def _trees(self):
        out = {}
        for g, c in self.centers.items():
            period = next(t.s_period for t in self.transversals if t.group == g)
            coords, box = _transversal_coords(c[:, 0], c[:, 1], period)
            out[g] = (cKDTree(coords, boxsize=box), period)
        return out

    def membership(self, x, xi, radius: float | None = None, time: float | None = None, count: bool = False,
                   min_normal: float = 0.5):
        """Whether each phase point lies in some tube.

        A point q is in tube j when phi_{-u}(q) lies in the transversal ball
        of radius ``radius`` about rho_j for some |u| <= ``time``.
        """
        radius = self.R if radius is None else radius
        time = self.tau + radius if time is None else time
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        hits = np.zeros(len(x), dtype=int)
        for t in self.transversals:
            idx, u, s, psi, xn = t.crossings(x, xi, time)
            ok = np.abs(xn) >= min_normal - 1e-12
            if not np.any(ok):
                continue
            tree, period = self._trees[t.group]
            coords, _ = _transversal_coords(s[ok], psi[ok], period)
            if count:
                nb = tree.query_ball_point(coords, radius * (1 + 1e-12), return_length=True)
                np.add.at(hits, idx[ok], nb)
            else:
                d, _ = tree.query(coords, k=1)
                np.add.at(hits, idx[ok], (d <= radius * (1 + 1e-12)).astype(int))
        return hits if count else hits > 0

    def members(self, x, xi, radius: float | None = None, time: float | None = None, min_normal: float = 0.5):
        """Pairs (point index, global tube index) with the point inside the tube.

        ``min_normal`` is the least |xi_N| accepted at the transversal crossing.
        """
        radius = self.R if radius is None else radius
        time = self.tau + radius if time is None else time
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        pts, tubes = [], []
        for t in self.transversals:
            idx, u, s, psi, xn = t.crossings(x, xi, time)
            ok = np.abs(xn) >= min_normal - 1e-12
            if not np.any(ok):
                continue
            tree, period = self._trees[t.group]
            coords, _ = _transversal_coords(s[ok], psi[ok], period)
            nb = tree.query_ball_point(coords, radius * (1 + 1e-12))
            lens = np.fromiter((len(a) for a in nb), dtype=int, count=len(nb))
            if lens.sum() == 0:
                continue
            pts.append(np.repeat(idx[ok], lens))
            tubes.append(self.offsets[t.id] + np.concatenate([np.asarray(a, dtype=int) for a in nb]))
        if not pts:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        return np.concatenate(pts), np.concatenate(tubes)

    def to_json(self) -> str:
        M = self.manifold
        return json.dumps(
            {
                "manifold": {"kind": M.kind, "dim": M.dim, "periods": None if M.periods is None else list(M.periods)},
                "tau": self.tau,
                "R": self.R,
                "sep": self.sep,
                "transversals": [t.to_json() for t in self.transversals],
                "centers": {str(g): c.tolist() for g, c in self.centers.items()},
                "classes": {str(g): c.tolist() for g, c in self.colors.items()},
                "D": self.D,
                "N_R": self.n_tubes,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GoodCover":
        d = json.loads(text)
        m = d["manifold"]
        M = sphere(m["dim"]) if m["kind"] == "sphere" else flat_torus(m["dim"], m["periods"])
        trs = [
            Transversal(
                t["id"], t["kind"], t["s_period"], tuple(t["origin"]), tuple(t["tangent"]), tuple(t["normal"]),
                t["group"], None if t["periods"] is None else tuple(t["periods"]),
            )
            for t in d["transversals"]
        ]
        centers = {int(g): np.asarray(c, dtype=float).reshape(-1, 2) for g, c in d["centers"].items()}
        colors = {int(g): np.asarray(c, dtype=int) for g, c in d["classes"].items()}
        return cls(M, d["tau"], d["R"], trs, centers, colors, d["sep"])


def build_good_cover(M: ModelManifold, tau: float, R: float, R0: float = R0_DEFAULT, verify: bool = False,
                     n_samples: int = 10_000) -> GoodCover:
    """(D, tau, R)-good cover of S*M by tubes over canonical transversals.

    Centers form a maximal R/2-separated set of each transversal. Tubes on
    one transversal are colored with conflict radius 6R, so their 3R-balls
    are disjoint inside a class; distinct transversals use distinct labels.
    When 2(tau + 3R) reaches the return time to a transversal the coloring
    falls back to singleton classes.
    """
    if not 0 < R < R0:
        raise DomainError(f"need 0 < R < R0 = {R0}, got R = {R}")
    tmax = _tau_max(M) if M.kind in ("flat_torus", "sphere") else 0.0
    if not 0 < tau < tmax:
        raise DomainError(f"need 0 < tau < tau_M = {tmax:.4g}, got tau = {tau}")
    trs = transversal_family(M, tau)
    centers, colors = {}, {}
    short_return = 2 * (tau + 3 * R) > _return_time(M)
    for t in trs:
        if t.group in centers:
            continue
        c = maximal_separated_set(t, R / 2, R0=R0)
        centers[t.group] = c
        coords, box = _transversal_coords(c[:, 0], c[:, 1], t.s_period)
        radius = np.inf if short_return else 6 * R
        colors[t.group], _ = greedy_partition(coords, radius, box)
    cover = GoodCover(M, tau, R, trs, centers, colors, R / 2)
    if verify:
        chk = check_cover_property(cover, n_samples)
        if not chk.passed:
            raise DomainError(f"cover property fails, e.g. at {chk.counterexample}")
        dj = check_disjointness(cover)
        if not dj.passed:
            raise DomainError(f"disjointness fails, e.g. at {dj.counterexample}")
    return cover


# --- checks ---------------------------------------------------------------------------


@dataclass
class CoverCheck:
    passed: bool
    fraction: float
    n_samples: int
    counterexample: object = None
    details: dict = field(default_factory=dict)


def _flow(M, x, xi, t):
    t = np.asarray(t, dtype=float)[:, None]
    if M.kind == "flat_torus":
        return np.mod(x + t * xi, np.asarray(M.periods)), xi.copy()
    return x * np.cos(t) + xi * np.sin(t), -x * np.sin(t) + xi * np.cos(t)


def _arc_psi(u):
    """Map u in [0,1) onto the two arcs |cos psi| >= 1/2."""
    v = 2 * u
    second = v >= 1
    return -_ARC + 2 * _ARC * np.where(second, v - 1, v) + np.where(second, np.pi, 0.0)


def check_cover_property(cover: GoodCover, n_samples: int = 10_000, seed: int = 0) -> CoverCheck:
    """Halton samples of the flow-out over |t| <= tau + R/2 of all transversals."""
    sampler = qmc.Halton(d=4, scramble=False, seed=seed)
    u = sampler.random(n_samples + 1)[1:]
    trs = cover.transversals
    k = np.minimum((u[:, 0] * len(trs)).astype(int), len(trs) - 1)
    half = cover.tau + cover.R / 2
    X = np.empty((n_samples, cover.manifold.rep_dim))
    XI = np.empty_like(X)
    for t in trs:
        sel = k == t.id
        if not np.any(sel):
            continue
        x, xi = t.embed(u[sel, 1] * t.s_period, _arc_psi(u[sel, 2]))
        X[sel], XI[sel] = _flow(cover.manifold, x, xi, (2 * u[sel, 3] - 1) * half)
    inside = cover.membership(X, XI)
    bad = np.nonzero(~inside)[0]
    ce = None if bad.size == 0 else (X[bad[0]].tolist(), XI[bad[0]].tolist())
    return CoverCheck(bad.size == 0, float(inside.mean()), n_samples, ce)


def check_uniform_coverage(cover: GoodCover, n_samples: int = 10_000, seed: int = 0) -> CoverCheck:
    """Low-discrepancy samples of all of S*M."""
    M = cover.manifold
    u = qmc.Halton(d=3, scramble=False, seed=seed).random(n_samples + 1)[1:]
    ang = 2 * np.pi * u[:, 2]
    if M.kind == "flat_torus":
        X = u[:, :2] * np.asarray(M.periods)
        XI = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        z = 2 * u[:, 0] - 1
        ph = 2 * np.pi * u[:, 1]
        r = np.sqrt(1 - z * z)
        X = np.stack([r * np.cos(ph), r * np.sin(ph), z], axis=1)
        e1 = np.stack([-np.sin(ph), np.cos(ph), np.zeros_like(ph)], axis=1)
        e2 = np.cross(X, e1)
        XI = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    inside = cover.membership(X, XI)
    bad = np.nonzero(~inside)[0]
    ce = None if bad.size == 0 else (X[bad[0]].tolist(), XI[bad[0]].tolist())
    return CoverCheck(bad.size == 0, float(inside.mean()), n_samples, ce)


def check_disjointness(cover: GoodCover, max_tubes: int = 300, seed: int = 0) -> CoverCheck:
    """Within-class disjointness of the 3R-inflated tubes.

    Three checks: every same-class pair on a transversal has center distance
    > 6R; the inflated flow-out window is shorter than the return time (or
    classes are singletons); and sampled points of inflated tubes never
    reach the 3R-ball of another same-class center through a crossing of
    their own transversal.
    """
    R, tau = cover.R, cover.tau
    details = {}
    # exhaustive center separation
    worst = np.inf
    for g, c in cover.centers.items():
        tree, period = cover._trees[g]
        pairs = tree.query_pairs(6 * R, output_type="ndarray")
        col = cover.colors[g]
        same = pairs[col[pairs[:, 0]] == col[pairs[:, 1]]] if len(pairs) else pairs
        if len(same):
            return CoverCheck(False, 0.0, len(pairs), ("same-class centers within 6R", g, same[0].tolist()), details)
        details[f"pairs_checked_group_{g}"] = int(len(pairs))
        worst = min(worst, len(same))
    singleton = all(len(np.unique(c)) == len(c) for c in cover.colors.values())
    window_ok = 2 * (tau + 3 * R) <= _return_time(cover.manifold)
    details["return_time_ok"] = bool(window_ok)
    details["singleton_classes"] = bool(singleton)
    if not (window_ok or singleton):
        return CoverCheck(False, 0.0, 0, "inflated window exceeds return time", details)
    # sampled inflated tubes
    rng = np.random.default_rng(seed)
    pick = rng.choice(cover.n_tubes, size=min(max_tubes, cover.n_tubes), replace=False)
    ds, dp = transversal_ball_samples(3 * R, spacing=3 * R / 4)
    ts = np.linspace(-(tau + 3 * R), tau + 3 * R, 9)
    n_pts = 0
    for j in pick:
        tb = cover.tube(int(j))
        tr = tb.transversal
        psi = tb.psi + dp
        keep = np.abs(np.cos(psi)) >= 0.5
        x0, xi0 = tr.embed(tb.s + ds[keep], psi[keep])
        X = np.concatenate([_flow(cover.manifold, x0, xi0, np.full(len(x0), t))[0] for t in ts])
        XI = np.concatenate([_flow(cover.manifold, x0, xi0, np.full(len(x0), t))[1] for t in ts])
        idx, u, s, ps, xn = tr.crossings(X, XI, tau + 3 * R)
        ok = np.abs(xn) >= 0.5 - 1e-12
        tree, period = cover._trees[tr.group]
        coords, _ = _transversal_coords(s[ok], ps[ok], period)
        nb = tree.query_ball_point(coords, 3 * R * (1 - 1e-9))
        col = cover.colors[tr.group]
        _, own = cover.locate(int(j))
        for lst in nb:
            for c in lst:
                if c != own and col[c] == col[own]:
                    return CoverCheck(False, 0.0, n_pts, ("sampled overlap", int(j), int(c)), details)
        n_pts += len(X)
    details["sampled_points"] = n_pts
    return CoverCheck(True, 1.0, n_pts, None, details)


# --- tubes over a ball ------------------------------------------------------------------


def segment_distance(M: ModelManifold, y, p, v, u0, u1):
    """Distance from y to the geodesic arc {phi_u(p, v): u0 <= u <= u1}; arrays broadcast."""
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    if M.kind == "flat_torus":
        P = np.asarray(M.periods, dtype=float)
        mid = 0.5 * (u0 + u1)
        half = 0.5 * (u1 - u0)
        c = p + mid[..., None] * v
        d = y - c
        d = d - P * np.round(d / P)
        k = max(1, int(np.ceil(float(np.max(half)) / float(P.min()))))
        best = np.full(np.broadcast(d[..., 0], half).shape, np.inf)
        rng = np.arange(-k, k + 1)
        for i in rng:
            for j in rng:
                w = d + np.array([i, j]) * P
                proj = np.clip(np.sum(w * v, axis=-1), -half, half)
                best = np.minimum(best, np.linalg.norm(w - proj[..., None] * v, axis=-1))
        return best
    mid = 0.5 * (u0 + u1)
    half = 0.5 * (u1 - u0)
    c = p * np.cos(mid)[..., None] + v * np.sin(mid)[..., None]
    w = -p * np.sin(mid)[..., None] + v * np.cos(mid)[..., None]
    a = np.sum(y * c, axis=-1)
    b = np.sum(y * w, axis=-1)
    ts = np.arctan2(b, a)
    normal = np.cross(c, w)
    dn = np.abs(np.sum(y * normal, axis=-1))
    circle = np.arctan2(dn, np.hypot(a, b))
    e0 = np.arccos(np.clip(a * np.cos(half) - b * np.sin(half), -1, 1))
    e1 = np.arccos(np.clip(a * np.cos(half) + b * np.sin(half), -1, 1))
    inside = (np.abs(ts) <= half) | (half >= np.pi)
    return np.where(inside, circle, np.minimum(e0, e1))


def _base_near(M, X, y, bound):
    if M.kind == "flat_torus":
        P = np.asarray(M.periods)
        d = X - y
        d = d - P * np.round(d / P)
        return np.linalg.norm(d, axis=1) <= bound
    return np.arccos(np.clip(X @ y, -1, 1)) <= bound


def tubes_over_ball(cover: GoodCover, x, r: float | None = None, tol: float = 1e-9) -> np.ndarray:
    """J_x: tubes whose base projection meets B(x, r), evaluated on cached samples.

    A tube qualifies when some cached ball sample's geodesic arc over
    |u| <= tau + R comes within r + tol of x.
    """
    M = cover.manifold
    r = cover.R if r is None else r
    y = np.asarray(x, dtype=float)
    X, XI, S, PSI, TID = cover.center_arrays
    L = cover.tau + cover.R
    cand = np.nonzero(_base_near(M, X, y, r + L + 2 * cover.R + 1e-9))[0]
    if cand.size == 0:
        return cand
    ds, dp = transversal_ball_samples(cover.R)
    out = []
    for t in cover.transversals:
        a, b = cover.offsets[t.id], cover.offsets[t.id + 1]
        cj = cand[(cand >= a) & (cand < b)]
        if cj.size == 0:
            continue
        s = S[cj][:, None] + ds[None, :]
        psi = PSI[cj][:, None] + dp[None, :]
        valid = np.abs(np.cos(psi)) >= 0.5 - 1e-12
        qx, qxi = t.embed(s, psi)
        d = segment_distance(M, y, qx, qxi, np.full(s.shape, -L), np.full(s.shape, L))
        d = np.where(valid, d, np.inf)
        hit = d.min(axis=1) <= r + tol
        out.append(cj[hit])
    return np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=int)
